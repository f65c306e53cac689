#!/usr/bin/env python3
"""
HTTP 服务测试
使用 FastAPI TestClient；后台任务在响应返回后同步执行
"""

import pytest
from fastapi.testclient import TestClient

import api

SMALL_ABSORBER = {
    'grid': {'nx': 6, 'n_polar': 2, 'n_azimuth': 4},
    'xs': {'sigma_a': 1.0},
    'sources': {'f': {'kind': 'constant', 'value': 1.0}},
}

SMALL_PLAN_TOML = """
[grid]
nx = 6
n_polar = 2
n_azimuth = 4

[regions.tumor]
radius = 0.35
label = "target"

[xs]
sigma_a = 0.6
sigma_s = 0.4

[rx]
d0 = 1.0
c = 1.0

[planning]
n_starts = 1
pg_max_iter = 3
"""


@pytest.fixture
def client(monkeypatch):
    monkeypatch.setattr(api.resource_monitor, "max_memory_usage", 100.0)
    with TestClient(api.app) as c:
        yield c


class TestService:
    def test_root_and_health(self, client):
        assert client.get("/").status_code == 200
        health = client.get("/health").json()
        assert health['status'] in ("healthy", "degraded")
        assert "memory_percent" in health['resource_status']
        print("✅ 健康检查测试通过")

    def test_validate_xs(self, client):
        ok = client.post("/validate_xs", json={'scenario': SMALL_ABSORBER}).json()
        assert ok['satisfied'] is True
        assert ok['c_row'] == pytest.approx(1.0)
        bad = client.post("/validate_xs", json={'scenario_toml': "[xs]\nsigma_a = 0.0\nsigma_s = 0.5\n"
                                                                 "[grid]\nnx = 4\nn_polar = 2\nn_azimuth = 4\n"})
        assert bad.json()['satisfied'] is False

    def test_bad_scenario(self, client):
        response = client.post("/validate_xs", json={'scenario': {'grid': {'nx': 1}}})
        assert response.status_code == 422
        assert response.json()['detail']['error_code'] == "ConfigError"
        assert client.post("/validate_xs", json={}).status_code == 400

    def test_solve_task(self, client):
        started = client.post("/solve", json={'scenario': SMALL_ABSORBER}).json()
        task_id = started['task_id']
        status = client.get(f"/task_status/{task_id}").json()
        assert status['status'] == "completed"
        result = client.get(f"/task_result/{task_id}").json()['result']
        assert result['report']['converged'] is True
        assert len(result['dose']) == len(result['nodes'])
        assert result['dose_max'] > 0.0
        assert client.get(f"/task_status/{task_id}").status_code == 404
        print("✅ 后台求解任务测试通过")

    def test_plan_task(self, client):
        started = client.post("/plan", json={'scenario_toml': SMALL_PLAN_TOML, 'phase': 'convex'}).json()
        result = client.get(f"/task_result/{started['task_id']}").json()['result']
        assert set(result['phases']) == {"init", "convex"}
        assert result['solves'] > 0

    def test_plan_requires_rx(self, client):
        response = client.post("/plan", json={'scenario': SMALL_ABSORBER})
        assert response.status_code == 400
        response = client.post("/plan", json={'scenario_toml': SMALL_PLAN_TOML, 'phase': 'global'})
        assert response.status_code == 400

    def test_failed_task_is_recorded(self, client):
        scenario = dict(SMALL_ABSORBER, solver={'max_iter': 1, 'tol': 1e-14}, xs={'sigma_a': 0.1, 'sigma_s': 0.9})
        before = client.get("/system/errors/stats").json()['total_errors']
        task_id = client.post("/solve", json={'scenario': scenario}).json()['task_id']
        status = client.get(f"/task_status/{task_id}").json()
        assert status['status'] == "failed"
        assert status['error']['error_code'] == "NoConvergence"
        assert status['error']['recoverable'] is True
        stats = client.get("/system/errors/stats").json()
        assert stats['total_errors'] == before + 1
        assert client.get(f"/task_result/{task_id}").status_code == 400

    def test_expired_tasks_evicted(self, client):
        """未领取结果的任务在保留时间后被清理，运行中的任务保留"""
        finished = client.post("/solve", json={'scenario': SMALL_ABSORBER}).json()['task_id']
        assert api.task_status[finished].status == "completed"
        running = "running-task"
        api.task_status[running] = api.TaskStatus("求解")
        api.task_status[finished].created -= api.TASK_TTL_SECONDS + 10
        api.task_status[running].created -= api.TASK_TTL_SECONDS + 10
        try:
            health = client.get("/health").json()
            assert health['expired_tasks_cleaned'] >= 1
            assert finished not in api.task_status
            assert client.get(f"/task_status/{finished}").status_code == 404
            assert running in api.task_status
            assert api.cleanup_expired_tasks() == 0
        finally:
            api.task_status.pop(running, None)
        print("✅ 过期任务清理测试通过")

    def test_fresh_tasks_kept(self, client):
        task_id = client.post("/solve", json={'scenario': SMALL_ABSORBER}).json()['task_id']
        client.post("/solve", json={'scenario': SMALL_ABSORBER})
        assert task_id in api.task_status
        assert client.get(f"/task_result/{task_id}").status_code == 200

    def test_unknown_task(self, client):
        assert client.get("/task_status/nope").status_code == 404
        assert client.get("/task_result/nope").status_code == 404


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
