import numpy as np
import pytest

from gridsplat.geometry import Camera
from gridsplat.splats import Splats


def fd_close(fd, g, rel=1e-3, floor=1e-8):
    """Spec tolerance rule for analytic-vs-finite-difference comparisons."""
    return abs(fd - g) <= max(rel * max(abs(fd), abs(g)), floor)


def central_diff(fn, arr, index, h=None):
    orig = arr[index]
    if h is None:
        h = 1e-6 * max(1.0, abs(orig))
    arr[index] = orig + h
    fp = fn()
    arr[index] = orig - h
    fm = fn()
    arr[index] = orig
    return (fp - fm) / (2.0 * h)


def simple_camera(width=32, height=32, fx=60.0, z=0.0, camera_id="cam0"):
    """Axis-aligned camera at the origin (or z) looking down +z."""
    return Camera(
        fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0, width=width, height=height,
        rotation_w2c=np.eye(3), translation_w2c=np.array([0.0, 0.0, -z]),
        near=0.1, far=100.0, camera_id=camera_id,
    )


def random_scene(n, seed, z_range=(3.0, 5.0), opacity_range=(-1.5, 1.5)):
    """Random splats in front of an axis-aligned camera, away from clamp and
    culling kinks so finite differences stay clean."""
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-0.6, 0.6, (n, 3))
    pos[:, 2] = rng.uniform(*z_range, n)
    return Splats(
        positions=pos,
        log_scales=rng.uniform(np.log(0.08), np.log(0.35), (n, 3)),
        rotations=rng.normal(size=(n, 4)),
        opacity_logits=rng.uniform(*opacity_range, n),
        color_logits=rng.uniform(-1.0, 1.0, (n, 3)),
    )


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)


def _fit_field_on_scene(spec, seed=0, iters=700):
    """Warm-up-style field-only fit against the oracle tracer (the real
    training path with zero total splat iterations)."""
    from gridsplat.densify import DensifyConfig
    from gridsplat.field import FieldConfig
    from gridsplat.synth import generate_synthetic
    from gridsplat.train import RunContext, TrainConfig, init_state, make_batch, train_step

    ds = generate_synthetic(spec)
    cfg = TrainConfig(
        total_iterations=iters,
        warmup_iterations=iters,
        rays_per_batch=256,
        samples_per_ray=24,
        use_harvest=False,
        use_warp=False,
        eval_interval=0,
        checkpoint_interval=10**9,
        seed=seed,
        field=FieldConfig(levels=8, table_log2=11, res_min=4, res_max=256, hidden=32),
        densify=DensifyConfig(harvest_iterations=()),
    )
    ctx = RunContext(ds, cfg)
    state = init_state(ctx)
    for _ in range(iters):
        train_step(state, make_batch(state, ctx), ctx)
    return state.field, ds, cfg


@pytest.fixture(scope="session")
def lambertian_fit():
    """Field overfit to a small matte scene; (field, dataset, spec, config)."""
    from gridsplat.synth import Primitive, SyntheticSceneSpec

    spec = SyntheticSceneSpec(
        seed=5, width=32, height=32, n_frames=20, trajectory="orbit",
        path_radius=3.5, path_height=1.6, path_span_deg=360.0,
        primitives=[
            Primitive(kind="disk", center=(0, 0, 0), size=(5.0,), color=(0.55, 0.6, 0.5)),
            Primitive(kind="box", center=(-0.4, 0.1, 0.5), size=(0.5, 0.45, 0.5),
                      color=(0.75, 0.2, 0.15)),
        ],
    )
    field, ds, cfg = _fit_field_on_scene(spec, seed=1, iters=700)
    return field, ds, spec, cfg


@pytest.fixture(scope="session")
def specular_fit():
    """Field overfit to a glossy-sphere scene (strong view dependence). The
    matte ground disk keeps the density honest: without it a white-background
    fit can collapse into white fog."""
    from gridsplat.synth import Primitive, SyntheticSceneSpec

    spec = SyntheticSceneSpec(
        seed=6, width=32, height=32, n_frames=20, trajectory="orbit",
        path_radius=3.0, path_height=1.4, path_span_deg=360.0,
        primitives=[
            Primitive(kind="disk", center=(0, 0, 0), size=(5.0,), color=(0.5, 0.55, 0.45)),
            Primitive(kind="sphere", center=(0.0, 0.0, 0.6), size=(0.6,),
                      color=(0.15, 0.3, 0.7), specular=0.9, shininess=12.0),
        ],
    )
    field, ds, cfg = _fit_field_on_scene(spec, seed=2, iters=700)
    return field, ds, spec, cfg
