#!/usr/bin/env python3
"""
运行时资源控制
线程数解析（--threads > BTE_THREADS > CPU 数）、内存预算与保序并行映射
"""

import gc
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, Iterable, List, Optional

import psutil
from dotenv import load_dotenv
from loguru import logger

from errors import MemoryLimitError

load_dotenv()

DENSE_TABLE_LIMIT_BYTES = 2 * 1024 ** 3


def resolve_threads(flag: Optional[int] = None) -> int:
    """解析工作线程数"""
    if flag is not None and flag > 0:
        return int(flag)
    env = os.getenv("BTE_THREADS")
    if env:
        try:
            value = int(env)
            if value > 0:
                return value
        except ValueError:
            logger.warning(f"忽略无效的 BTE_THREADS={env!r}")
    return os.cpu_count() or 1


def parallel_map(fn: Callable[[Any], Any], items: Iterable[Any], threads: int = 1) -> List[Any]:
    """保序并行映射；结果与线程数无关"""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


class ResourceBudget:
    """内存预算：决定是否缓存特征线矩阵，拒绝超大的稠密表"""

    def __init__(self, max_memory_usage_percent: float = 80.0, cache_fraction: float = 0.5):
        self.max_memory_usage_percent = max_memory_usage_percent
        self.cache_fraction = cache_fraction

    def check_memory_usage(self) -> Dict[str, float]:
        """检查当前内存使用情况"""
        memory = psutil.virtual_memory()
        return {
            'total_gb': memory.total / 1024 / 1024 / 1024,
            'available_gb': memory.available / 1024 / 1024 / 1024,
            'used_percent': memory.percent,
            'free_percent': 100 - memory.percent
        }

    def is_memory_available(self, required_mb: float) -> bool:
        """检查是否有足够的内存用于缓存"""
        memory = psutil.virtual_memory()
        available_mb = memory.available / 1024 / 1024
        return (memory.percent < self.max_memory_usage_percent and
                available_mb * self.cache_fraction > required_mb)

    def require_dense(self, n_bytes: int, what: str = "稠密表"):
        """稠密数组超过 2 GiB 或可用内存时拒绝分配"""
        if n_bytes > DENSE_TABLE_LIMIT_BYTES:
            raise MemoryLimitError(
                f"{what}需要 {n_bytes / 1024 ** 3:.2f} GiB，超过 2 GiB 上限",
                details={'bytes': int(n_bytes)}
            )
        available = psutil.virtual_memory().available
        if n_bytes > available:
            raise MemoryLimitError(
                f"{what}需要 {n_bytes / 1024 ** 3:.2f} GiB，可用内存不足",
                details={'bytes': int(n_bytes), 'available': int(available)}
            )

    def release(self):
        """释放缓存后触发垃圾回收"""
        gc.collect()
        info = self.check_memory_usage()
        logger.debug(f"内存清理完成，当前使用率: {info['used_percent']:.1f}%")


_budget = ResourceBudget()


def get_resource_budget() -> ResourceBudget:
    """获取全局内存预算实例"""
    return _budget
