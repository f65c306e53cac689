#!/usr/bin/env python3
"""
输运求解器错误定义
统一的异常层次结构与错误处理器（错误统计、可恢复性判断、退出码映射）
"""

import time
from typing import Any, Dict, List, Optional

from loguru import logger


class TransportError(Exception):
    """求解器相关错误基类"""

    exit_code = 1

    def __init__(self, message: str, error_code: str = None, details: dict = None):
        super().__init__(message)
        self.message = message
        self.error_code = error_code or self.__class__.__name__
        self.details = details or {}
        self.timestamp = time.time()


class InputValidationError(TransportError):
    """输入验证错误（用法错误，退出码 2）"""

    exit_code = 2


class DomainFailure(TransportError):
    """领域失败：条件不满足或迭代不收敛（退出码 1）"""

    exit_code = 1


# === 几何 ===

class NotInterior(InputValidationError):
    """点不在区域内部"""


class BadDirection(InputValidationError):
    """方向向量不是单位向量"""


class TangentFace(DomainFailure):
    """射线掠过边界（|ω·ν| 过小）"""


class NotOnBoundary(InputValidationError):
    """点不在边界上"""


# === 离散化 ===

class EmptyGrid(InputValidationError):
    """网格中没有落在区域内部的节点"""


class ShapeMismatch(InputValidationError):
    """场的形状与网格不匹配"""


class BadExponent(InputValidationError):
    """不支持的范数指数"""


class LengthMismatch(InputValidationError):
    """轨迹长度与时间网格不一致"""


# === 截面 ===

class NegativeData(InputValidationError):
    """截面数据出现负值"""


class MemoryLimitError(TransportError):
    """内存预算不足"""


# === 求解 ===

class NoConvergence(DomainFailure):
    """迭代达到最大次数仍未收敛"""


class NonPositiveLambda(InputValidationError):
    """预解式参数 λ 必须为正"""


class AsymmetricGrid(InputValidationError):
    """角度求积不满足对径对称"""


class SeriesDivergence(DomainFailure):
    """指数级数截断误差过大（时间步过大）"""


class HasKernel(InputValidationError):
    """显式解只适用于无散射核的配置"""


class LineSearchStall(DomainFailure):
    """Armijo 线搜索步长过小"""


# === 验证器 ===

class SubCriticalViolation(DomainFailure):
    """次临界条件不满足，蒙特卡罗历史可能不终止"""


class ZeroSource(InputValidationError):
    """源项没有可抽样的正质量"""


class WrongConfiguration(InputValidationError):
    """配置不符合该操作的前提"""


class ConfigError(InputValidationError):
    """场景配置解析或校验失败"""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None,
                 details: dict = None):
        details = dict(details or {})
        if line is not None:
            details["line"] = line
            details["column"] = column
            message = f"{message} (行 {line}, 列 {column})"
        super().__init__(message, details=details)
        self.line = line
        self.column = column


class ErrorHandler:
    """统一错误处理器"""

    RECOVERABLE = (NoConvergence, SeriesDivergence, LineSearchStall, TangentFace, MemoryLimitError)

    def __init__(self, max_recent_errors: int = 100):
        self.error_stats = {
            'total_errors': 0,
            'error_types': {},
            'recent_errors': []
        }
        self.max_recent_errors = max_recent_errors

    def handle_error(self, error: Exception, task_id: str = None, context: dict = None) -> Dict[str, Any]:
        """记录错误并返回结构化描述"""
        error_info = {
            'error_type': type(error).__name__,
            'message': str(error),
            'timestamp': time.time(),
            'task_id': task_id,
            'context': context or {}
        }

        self.error_stats['total_errors'] += 1
        error_type = error_info['error_type']
        self.error_stats['error_types'][error_type] = self.error_stats['error_types'].get(error_type, 0) + 1

        self.error_stats['recent_errors'].append(error_info)
        if len(self.error_stats['recent_errors']) > self.max_recent_errors:
            self.error_stats['recent_errors'] = self.error_stats['recent_errors'][-self.max_recent_errors:]

        if isinstance(error, TransportError):
            logger.error(f"求解错误 (任务ID: {task_id}): [{error.error_code}] {error.message}")
            return {
                'error_code': error.error_code,
                'message': error.message,
                'details': error.details,
                'timestamp': error.timestamp,
                'recoverable': self.is_recoverable(error),
                'exit_code': error.exit_code
            }

        logger.exception(f"未知错误 (任务ID: {task_id}): {error}")
        return {
            'error_code': 'UNKNOWN_ERROR',
            'message': f"系统内部错误: {error}",
            'error_type': type(error).__name__,
            'timestamp': time.time(),
            'recoverable': False,
            'exit_code': 1
        }

    def is_recoverable(self, error: TransportError) -> bool:
        """参数调整后可重试的错误（减小步长、阻尼等）"""
        return isinstance(error, self.RECOVERABLE)

    def exit_code(self, error: Exception) -> int:
        """映射到命令行退出码：0 成功，1 领域失败，2 用法/解析错误"""
        if isinstance(error, TransportError):
            return error.exit_code
        return 1

    def get_error_stats(self) -> Dict[str, Any]:
        """获取错误统计信息"""
        return {
            'total_errors': self.error_stats['total_errors'],
            'error_types': self.error_stats['error_types'].copy(),
            'recent_errors_count': len(self.error_stats['recent_errors']),
            'most_common_errors': sorted(
                self.error_stats['error_types'].items(),
                key=lambda x: x[1],
                reverse=True
            )[:5]
        }

    def get_recent_errors(self, limit: int = 10) -> List[dict]:
        """获取最近的错误记录"""
        return self.error_stats['recent_errors'][-limit:]
