#!/usr/bin/env python3
"""
错误处理与运行时资源控制测试
"""

import threading

import pytest

from errors import (ConfigError, ErrorHandler, InputValidationError, MemoryLimitError, NoConvergence,
                    ShapeMismatch, SubCriticalViolation, TransportError)
from runtime import DENSE_TABLE_LIMIT_BYTES, ResourceBudget, get_resource_budget, parallel_map, resolve_threads


class TestErrorHandling:
    """错误层次与统一处理器"""

    def test_exit_codes(self):
        handler = ErrorHandler()
        assert handler.exit_code(ShapeMismatch("形状不符")) == 2
        assert handler.exit_code(ConfigError("坏配置")) == 2
        assert handler.exit_code(NoConvergence("未收敛")) == 1
        assert handler.exit_code(SubCriticalViolation("条件不满足")) == 1
        assert handler.exit_code(RuntimeError("其他")) == 1
        print("✅ 退出码映射测试通过")

    def test_error_code_defaults_to_class_name(self):
        error = ShapeMismatch("形状不符", details={'expected': [3, 4]})
        assert error.error_code == "ShapeMismatch"
        assert isinstance(error, InputValidationError)
        assert isinstance(error, TransportError)
        assert error.details['expected'] == [3, 4]

    def test_config_error_position(self):
        error = ConfigError("语法错误", line=3, column=7)
        assert error.details == {'line': 3, 'column': 7}
        assert "行 3" in error.message

    def test_handle_and_stats(self):
        handler = ErrorHandler(max_recent_errors=3)
        info = handler.handle_error(NoConvergence("未收敛", details={'residual': 1e-3}), task_id="t1")
        assert info['error_code'] == "NoConvergence"
        assert info['recoverable'] is True
        assert info['exit_code'] == 1
        assert handler.handle_error(ShapeMismatch("形状不符"))['recoverable'] is False
        unknown = handler.handle_error(ValueError("意外"))
        assert unknown['error_code'] == "UNKNOWN_ERROR"
        for _ in range(3):
            handler.handle_error(NoConvergence("未收敛"))
        stats = handler.get_error_stats()
        assert stats['total_errors'] == 6
        assert stats['error_types']['NoConvergence'] == 4
        assert stats['most_common_errors'][0] == ("NoConvergence", 4)
        assert stats['recent_errors_count'] == 3
        assert len(handler.get_recent_errors(2)) == 2
        print("✅ 错误统计测试通过")


class TestThreads:
    def test_flag_wins(self, monkeypatch):
        monkeypatch.setenv("BTE_THREADS", "3")
        assert resolve_threads(5) == 5

    def test_environment(self, monkeypatch):
        monkeypatch.setenv("BTE_THREADS", "3")
        assert resolve_threads(None) == 3

    def test_invalid_environment_falls_back(self, monkeypatch):
        monkeypatch.setenv("BTE_THREADS", "many")
        assert resolve_threads(None) >= 1
        monkeypatch.delenv("BTE_THREADS")
        assert resolve_threads(0) >= 1

    def test_parallel_map_keeps_order(self):
        seen = set()

        def work(k):
            seen.add(threading.get_ident())
            return k * k

        assert parallel_map(work, range(20), threads=4) == [k * k for k in range(20)]
        assert parallel_map(work, range(20), threads=1) == [k * k for k in range(20)]
        assert len(seen) >= 1


class TestResourceBudget:
    """内存预算"""

    def test_memory_stats(self):
        info = ResourceBudget().check_memory_usage()
        assert 0.0 <= info['used_percent'] <= 100.0
        assert info['free_percent'] == pytest.approx(100.0 - info['used_percent'])

    def test_dense_limit(self):
        budget = get_resource_budget()
        budget.require_dense(1024)
        with pytest.raises(MemoryLimitError) as exc_info:
            budget.require_dense(DENSE_TABLE_LIMIT_BYTES + 1, "测试表")
        assert exc_info.value.details['bytes'] == DENSE_TABLE_LIMIT_BYTES + 1

    def test_cache_threshold(self):
        assert ResourceBudget(max_memory_usage_percent=0.0).is_memory_available(1.0) is False
        assert ResourceBudget().is_memory_available(1e12) is False


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
