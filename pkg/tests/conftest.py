import pytest

from stragglersim import (
    JobSpec,
    ModelProfile,
    PgnsCurve,
    SensitivityProfile,
    ServerSpec,
    WorldSpec,
)


def make_profile(**overrides) -> ModelProfile:
    sens = SensitivityProfile(baseline_tta=100.0, throttle_points=((0.5, 1.25),))
    defaults = dict(
        name="toy",
        gpu_compute_time=0.10,
        param_bytes=1.0e8,
        preproc_work=0.30,
        ps_update_work=0.02,
        busy_poll_cores=0.5,
        pgns=PgnsCurve.flat(512.0),
        progress_target_tta=20.0,
        progress_target_conv=30.0,
        sensitivity_cpu=sens,
        sensitivity_bw=sens,
        cpu_demand=1.0,
        bw_demand=1.0e9,
        ps_cpu_demand=2.0,
        ps_bw_demand=1.0e9,
    )
    defaults.update(overrides)
    return ModelProfile(**defaults)


def make_world(profile=None, num_servers=3, job=None, jobs=None, **server_overrides):
    profile = profile or make_profile()
    server_defaults = dict(cpu_capacity=16.0, bw_capacity=8.0e9, gpu_slots=4)
    server_defaults.update(server_overrides)
    servers = tuple(
        ServerSpec(id=f"s{i}", **server_defaults) for i in range(num_servers)
    )
    if jobs is None:
        jobs = (job,) if job is not None else ()
    return WorldSpec(servers=servers, profiles={profile.name: profile}, jobs=jobs)


def make_job(**overrides) -> JobSpec:
    defaults = dict(
        id="j1",
        submit_time=0.0,
        model="toy",
        num_workers=8,
        num_ps=1,
        architecture="ps",
        batch_per_worker=64,
        learning_rate=0.1,
        policy="ssgd",
    )
    defaults.update(overrides)
    return JobSpec(**defaults)


@pytest.fixture
def toy_profile():
    return make_profile()
