#!/usr/bin/env python3
"""
输运求解 HTTP 服务
以后台任务方式运行稳态求解与剂量规划，查询任务状态与结果
"""

import time
import uuid
from contextlib import asynccontextmanager
from datetime import datetime
from typing import Any, Dict, Optional

import numpy as np
import psutil
from fastapi import BackgroundTasks, FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from loguru import logger
from pydantic import BaseModel

from cross_sections import validate
from dose import compute_dose
from errors import ConfigError, ErrorHandler, TransportError
from planning import optimize_projected_gradient, solve_initial
from runtime import get_resource_budget
from scenario import Scenario, build_case, parse_scenario, scenario_from_dict
from transport import solve_coupled


class ResourceMonitor:
    """系统资源检查（psutil 即时读数）"""

    def __init__(self, max_concurrent_tasks: int = 2, max_memory_usage: float = 80.0):
        self.max_concurrent_tasks = max_concurrent_tasks
        self.max_memory_usage = max_memory_usage

    def get_resource_stats(self) -> dict:
        memory = psutil.virtual_memory()
        return {
            'cpu_percent': psutil.cpu_percent(interval=None),
            'memory_percent': memory.percent,
            'memory_available_gb': round(memory.available / 1024 ** 3, 2),
            'active_tasks': sum(1 for s in task_status.values() if s.status == "running"),
        }

    def check_resource_limits(self) -> tuple:
        stats = self.get_resource_stats()
        if stats['active_tasks'] >= self.max_concurrent_tasks:
            return False, f"已达到最大并发任务数限制: {self.max_concurrent_tasks}"
        if stats['memory_percent'] > self.max_memory_usage:
            return False, f"内存使用率过高: {stats['memory_percent']:.1f}% > {self.max_memory_usage}%"
        return True, "资源检查通过"


class TaskStatus:
    def __init__(self, kind: str):
        self.kind = kind
        self.status = "running"
        self.progress = 0
        self.message = ""
        self.result: Optional[dict] = None
        self.error: Optional[dict] = None
        self.created = time.time()


class ScenarioRequest(BaseModel):
    """场景：TOML 文本或 JSON 对象二选一"""
    scenario_toml: Optional[str] = None
    scenario: Optional[Dict[str, Any]] = None


class PlanRequest(ScenarioRequest):
    phase: str = "init"


task_status: Dict[str, TaskStatus] = {}
resource_monitor = ResourceMonitor()
error_handler = ErrorHandler()
TASK_TTL_SECONDS = 3600  # 已结束任务的保留时间(秒)


def cleanup_expired_tasks(max_age: float = TASK_TTL_SECONDS) -> int:
    """删除已结束且超过保留时间的任务，返回清理数量；运行中的任务不受影响"""
    current_time = time.time()
    expired = [task_id for task_id, status in list(task_status.items())
               if status.status != "running" and current_time - status.created > max_age]
    for task_id in expired:
        task_status.pop(task_id, None)
        logger.info(f"清理过期任务: {task_id}")
    return len(expired)


@asynccontextmanager
async def lifespan(app: FastAPI):
    logger.info("启动输运求解 API 服务")
    yield
    logger.info("关闭输运求解 API 服务")
    get_resource_budget().release()


app = FastAPI(lifespan=lifespan)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


def _parse(request: ScenarioRequest) -> Scenario:
    try:
        if request.scenario_toml is not None:
            return parse_scenario(request.scenario_toml)
        if request.scenario is not None:
            return scenario_from_dict(request.scenario)
    except ConfigError as e:
        error_handler.handle_error(e, context={'operation': 'parse_scenario'})
        raise HTTPException(status_code=422, detail={'error_code': e.error_code, 'message': e.message,
                                                     'details': e.details})
    raise HTTPException(status_code=400, detail="必须提供 scenario_toml 或 scenario 字段")


def _start(kind: str, background_tasks: BackgroundTasks, fn, *args) -> dict:
    cleanup_expired_tasks()
    can_accept, message = resource_monitor.check_resource_limits()
    if not can_accept:
        raise HTTPException(status_code=503, detail=f"系统资源不足，无法接受新任务: {message}")
    task_id = str(uuid.uuid4())
    task_status[task_id] = TaskStatus(kind)
    logger.info(f"收到{kind}请求，任务ID: {task_id}")
    background_tasks.add_task(_run_task, task_id, fn, *args)
    return {"task_id": task_id, "status": "started", "message": f"{kind}任务已启动，请使用task_id查询进度"}


def _run_task(task_id: str, fn, *args):
    status = task_status[task_id]
    try:
        status.result = fn(status, *args)
        status.status = "completed"
        status.progress = 100
        status.message = "完成"
    except Exception as e:
        status.status = "failed"
        status.error = error_handler.handle_error(e, task_id, {'kind': status.kind})
        status.message = status.error.get('message', str(e))


def _solve_job(status: TaskStatus, scenario: Scenario) -> dict:
    status.message = "构建网格"
    case = build_case(scenario)
    status.progress = 20
    status.message = "源迭代"
    result = solve_coupled(case.xs, case.f, case.g, case.grid, scenario.solver)
    dose = compute_dose(result.psi, case.xs, case.grid)
    return {
        'report': result.report.as_dict(),
        'dose': dose.tolist(),
        'nodes': case.grid.spatial.nodes.tolist(),
        'dose_max': float(dose.max()),
    }


def _plan_job(status: TaskStatus, scenario: Scenario, phase: str) -> dict:
    status.message = "构建计划问题"
    pc = build_case(scenario).planning_case()
    status.progress = 10
    status.message = "初始解"
    result = solve_initial(pc)
    summaries = {'init': result.summary()}
    phases = {"init": [], "convex": ["convex"], "dv": ["convex", "dv"]}[phase]
    for k, name in enumerate(phases):
        status.progress = 40 + 30 * k
        status.message = f"投影梯度 ({name})"
        result = optimize_projected_gradient(pc, result.control.values, phase=name)
        summaries[name] = result.summary()
        summaries[name]['history'] = result.history
    return {
        'phases': summaries,
        'dose': pc.dose(result.psi).tolist(),
        'control_nonzeros': int(np.count_nonzero(result.control.values)),
        'solves': pc.n_solves,
    }


@app.get("/")
async def root():
    return {"message": "输运求解 API 正在运行。请使用 POST /solve 或 POST /plan 提交任务。"}


@app.get("/health")
async def health_check():
    expired = cleanup_expired_tasks()
    stats = resource_monitor.get_resource_stats()
    can_accept, message = resource_monitor.check_resource_limits()
    return {
        "status": "healthy" if can_accept else "degraded",
        "timestamp": datetime.now().isoformat() + "Z",
        "total_tasks": len(task_status),
        "expired_tasks_cleaned": expired,
        "resource_status": {"can_accept_tasks": can_accept, "message": message, **stats},
    }


@app.post("/validate_xs")
async def validate_xs(request: ScenarioRequest):
    """同步的次临界条件校验"""
    scenario = _parse(request)
    try:
        case = build_case(scenario)
        report = validate(case.xs, case.grid)
    except TransportError as e:
        info = error_handler.handle_error(e, context={'operation': 'validate_xs'})
        raise HTTPException(status_code=400, detail=info)
    return {**report.as_dict(), 'per_species': report.per_species}


@app.post("/solve")
async def solve(request: ScenarioRequest, background_tasks: BackgroundTasks):
    return _start("稳态求解", background_tasks, _solve_job, _parse(request))


@app.post("/plan")
async def plan(request: PlanRequest, background_tasks: BackgroundTasks):
    if request.phase not in ("init", "convex", "dv"):
        raise HTTPException(status_code=400, detail=f"未知的优化阶段: {request.phase}")
    scenario = _parse(request)
    if scenario.rx is None:
        raise HTTPException(status_code=400, detail="规划需要 [rx] 处方段")
    return _start("剂量规划", background_tasks, _plan_job, scenario, request.phase)


@app.get("/task_status/{task_id}")
async def get_task_status(task_id: str):
    if task_id not in task_status:
        raise HTTPException(status_code=404, detail="任务不存在")
    status = task_status[task_id]
    response = {
        "task_id": task_id,
        "kind": status.kind,
        "status": status.status,
        "progress": status.progress,
        "message": status.message,
    }
    if status.status == "completed":
        response["result_available"] = True
    elif status.status == "failed":
        response["error"] = status.error
    return response


@app.get("/task_result/{task_id}")
async def get_task_result(task_id: str):
    """获取任务完整结果（取走后清理任务状态）"""
    if task_id not in task_status:
        raise HTTPException(status_code=404, detail="任务不存在或已过期")
    status = task_status[task_id]
    if status.status != "completed":
        raise HTTPException(status_code=400, detail=f"任务尚未完成，当前状态: {status.status}")
    result = status.result
    del task_status[task_id]
    return {"task_id": task_id, "result": result}


@app.get("/system/errors/stats")
async def get_error_stats():
    return error_handler.get_error_stats()
