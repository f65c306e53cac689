#!/usr/bin/env python3
"""启动输运求解 HTTP 服务"""

import uvicorn

if __name__ == "__main__":
    uvicorn.run(
        "api:app",
        port=7878,
        reload=False
    )
