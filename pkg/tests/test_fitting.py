import dataclasses
import math

import numpy as np
import pytest

import splatvol as sv
from splatvol.errors import ConfigError, ContractError, OptimizerError
from splatvol.fitting import FitConfig, ViewspaceAccumulator
from splatvol.render import GradientBuffer


def test_initialize_examples():
    vol, pool = sv.initialize(2)
    assert vol.n_points == 8 and vol.n_active == 8 and len(pool) == 0
    corners = vol.grid_positions()
    assert np.allclose(np.abs(corners), 1.0)
    vol32, _ = sv.initialize(32)
    assert vol32.n_points == 32768
    assert np.allclose(vol32.activated_opacities(), 0.1, atol=1e-7)
    with pytest.raises(ConfigError):
        sv.initialize(1)


def test_initialize_scale_is_half_voxel():
    vol, _ = sv.initialize(5)
    spacing = vol.bounds.spacing(5)
    assert np.allclose(np.exp(vol.log_scales), spacing / 2, rtol=1e-6)


def _cfg(**kw):
    base = dict(total_iters=10, resolution=2)
    base.update(kw)
    return FitConfig(**base)


def test_adam_zero_gradient_is_identity():
    vol, _ = sv.initialize(2)
    state = sv.AdamState.zeros(vol.n_points)
    before = vol.channel_matrix().copy()
    sv.adam_step(vol, GradientBuffer.zeros(vol.n_points), state, _cfg())
    assert np.array_equal(vol.channel_matrix(), before)
    assert all(np.all(m == 0) for m in state.m.values())
    assert state.step == 1


def test_adam_first_step_closed_form():
    vol, _ = sv.initialize(2)
    state = sv.AdamState.zeros(vol.n_points)
    grads = GradientBuffer.zeros(vol.n_points)
    g = 0.37
    grads.color[:, 0] = g
    before = vol.colors[:, 0].astype(np.float64).copy()
    cfg = _cfg()
    sv.adam_step(vol, grads, state, cfg)
    # Bias correction cancels on the first step, so the update is exactly
    # lr * g / (|g| + eps), i.e. lr * sign(g) up to eps.
    step = cfg.lr.color * g / (abs(g) + cfg.adam_eps)
    assert abs(step - cfg.lr.color) < 1e-9
    assert np.array_equal(vol.colors[:, 0],
                          (before - step).astype(np.float32))


def test_adam_rejects_gradient_on_deactivated():
    vol, _ = sv.initialize(2)
    vol.active_mask[3] = False
    grads = GradientBuffer.zeros(vol.n_points)
    grads.offset[3, 0] = 1.0
    with pytest.raises(ContractError):
        sv.adam_step(vol, grads, sv.AdamState.zeros(vol.n_points), _cfg())


def test_adam_rejects_nonfinite_gradient():
    vol, _ = sv.initialize(2)
    grads = GradientBuffer.zeros(vol.n_points)
    grads.log_scale[1, 2] = np.nan
    with pytest.raises(OptimizerError, match="log_scale"):
        sv.adam_step(vol, grads, sv.AdamState.zeros(vol.n_points), _cfg())


def test_adam_leaves_deactivated_untouched():
    vol, _ = sv.initialize(2)
    vol.active_mask[5] = False
    before = vol.channel_matrix()[5].copy()
    grads = GradientBuffer.zeros(vol.n_points)
    grads.color[vol.active_mask] = 1.0
    sv.adam_step(vol, grads, sv.AdamState.zeros(vol.n_points), _cfg())
    assert np.array_equal(vol.channel_matrix()[5], before)


def test_prune_select_cases():
    vol, _ = sv.initialize(2)
    vol.opacity_logits[:] = 2.2  # opacity ~ 0.9
    assert sv.prune_select(vol, 0.01).size == 0
    vol.opacity_logits[4] = math.log(0.001 / 0.999)
    assert list(sv.prune_select(vol, 0.01)) == [4]


def test_prune_select_matches_bruteforce_filter():
    rng = np.random.default_rng(0)
    vol, _ = sv.initialize(3)
    vol.opacity_logits[:] = rng.normal(-2, 2.5, vol.n_points).astype(np.float32)
    vol.active_mask[:] = rng.uniform(size=vol.n_points) < 0.7
    tau = 0.05
    expected = [i for i in range(vol.n_points)
                if vol.active_mask[i]
                and 1 / (1 + math.exp(-float(vol.opacity_logits[i]))) < tau]
    assert list(sv.prune_select(vol, tau)) == expected


def test_densify_select_cases():
    vol, _ = sv.initialize(2)
    norms = np.zeros(vol.n_points)
    assert sv.densify_select(vol, norms, 1e-4).size == 0
    norms[2] = 1e-3
    assert list(sv.densify_select(vol, norms, 1e-4)) == [2]


def test_densify_select_matches_bruteforce_filter():
    rng = np.random.default_rng(1)
    vol, _ = sv.initialize(3)
    vol.active_mask[:] = rng.uniform(size=vol.n_points) < 0.6
    norms = rng.exponential(1e-4, vol.n_points)
    tau = 1e-4
    expected = [i for i in range(vol.n_points) if vol.active_mask[i] and norms[i] > tau]
    assert list(sv.densify_select(vol, norms, tau)) == expected


def test_pool_exchange_noop():
    vol, pool = sv.initialize(2)
    before = vol.channel_matrix().copy()
    sv.pool_exchange(vol, pool, np.array([], dtype=np.int64),
                     np.array([], dtype=np.int64), 0.1, pool_radius=1.0,
                     rng=np.random.default_rng(0))
    assert np.array_equal(vol.channel_matrix(), before)
    assert len(pool) == 0


def test_pool_exchange_prune_bookkeeping():
    vol, pool = sv.initialize(3)
    pruned = np.array([0, 5, 9, 11, 20])
    sv.pool_exchange(vol, pool, pruned, np.array([], dtype=np.int64), 0.1,
                     pool_radius=1.0, rng=np.random.default_rng(0))
    assert vol.n_active == 27 - 5
    assert len(pool) == 5
    assert vol.n_active + len(pool) == vol.n_points
    assert not vol.active_mask[pruned].any()


def test_pool_exchange_densify_clone():
    vol, pool = sv.initialize(3)
    eps = 0.05
    spacing = float(vol.bounds.spacing(3).min())
    # Park index 14 (z-neighbor of center 13) in the pool, then densify 13.
    sv.pool_exchange(vol, pool, np.array([14]), np.array([], dtype=np.int64),
                     eps, pool_radius=2 * spacing, rng=np.random.default_rng(0))
    center_idx = sv.grid_index(1, 1, 1, 3)
    vol.colors[center_idx] = [0.9, 0.1, 0.2]
    vol.opacity_logits[center_idx] = 0.0  # opacity 0.5
    activated = sv.pool_exchange(vol, pool, np.array([], dtype=np.int64),
                                 np.array([center_idx]), eps,
                                 pool_radius=2 * spacing,
                                 rng=np.random.default_rng(1))
    assert activated == [14]
    assert len(pool) == 0
    assert vol.n_active == 27
    # Clone carries color/scale, both halves get opacity 0.25.
    assert np.allclose(vol.colors[14], [0.9, 0.1, 0.2])
    opac = vol.activated_opacities()
    assert opac[14] == pytest.approx(0.25, rel=1e-5)
    assert opac[center_idx] == pytest.approx(0.25, rel=1e-5)
    # New center stays within eps of its own grid point, componentwise.
    assert np.all(np.abs(vol.offsets[14]) <= eps + 1e-7)


def test_pool_exchange_skips_when_no_candidate_in_range():
    vol, pool = sv.initialize(3)
    sv.pool_exchange(vol, pool, np.array([26]), np.array([], dtype=np.int64),
                     0.05, pool_radius=0.1, rng=np.random.default_rng(0))
    # Index 0 is the opposite corner; the only pooled point is far away.
    activated = sv.pool_exchange(vol, pool, np.array([], dtype=np.int64),
                                 np.array([0]), 0.05, pool_radius=0.1,
                                 rng=np.random.default_rng(0))
    assert activated == []
    assert len(pool) == 1


def test_pool_exchange_rejects_overlap():
    vol, pool = sv.initialize(2)
    with pytest.raises(ContractError):
        sv.pool_exchange(vol, pool, np.array([1]), np.array([1]), 0.05,
                         pool_radius=1.0, rng=np.random.default_rng(0))


def test_release_pool():
    vol, pool = sv.initialize(2)
    assert sv.release_pool(vol, pool).size == 0  # empty pool: no-op
    sv.pool_exchange(vol, pool, np.array([1, 2, 3]), np.array([], dtype=np.int64),
                     0.05, pool_radius=1.0, rng=np.random.default_rng(0))
    vol.offsets[1] = 0.5
    released = sv.release_pool(vol, pool)
    assert sorted(released) == [1, 2, 3]
    assert len(pool) == 0
    assert vol.n_active == vol.n_points
    assert np.all(vol.offsets[[1, 2, 3]] == 0.0)
    assert np.allclose(vol.activated_opacities()[[1, 2, 3]], 0.01, atol=1e-7)
    assert sv.offsets_reg(vol, 0.05) == 0.0


def _tiny_dataset(seed=0, count=12, views=6, size=40, radius=2.4):
    scene = sv.make_scene(sv.SceneSpec(seed=seed, gaussian_count=count,
                                       placement_radius=0.4,
                                       scale_range=(0.08, 0.16)))
    return scene, sv.render_dataset(scene, views, radius, size)


def test_fit_zero_iterations_returns_initialized_volume():
    _, ds = _tiny_dataset()
    res = sv.fit(ds, FitConfig(total_iters=0, resolution=2))
    ref, _ = sv.initialize(2)
    assert np.array_equal(res.volume.channel_matrix(), ref.channel_matrix())
    assert res.metrics == []
    assert res.volume.n_active == 8


def test_fit_empty_dataset_rejected():
    ds = sv.ViewSet(cameras=[], images=[])
    with pytest.raises(ConfigError):
        sv.fit(ds, FitConfig(total_iters=1, resolution=2))


def test_fit_seeded_reproducibility():
    _, ds = _tiny_dataset()
    cfg = FitConfig(total_iters=30, resolution=4, seed=7)
    a = sv.fit(ds, cfg)
    b = sv.fit(ds, cfg)
    assert [(m.loss, m.psnr, m.active_count) for m in a.metrics] == \
        [(m.loss, m.psnr, m.active_count) for m in b.metrics]
    assert np.array_equal(a.volume.channel_matrix(), b.volume.channel_matrix())


def test_fit_improves_loss():
    _, ds = _tiny_dataset()
    cfg = FitConfig(total_iters=120, resolution=4, use_cps=False)
    res = sv.fit(ds, cfg)
    start = np.mean([m.loss for m in res.metrics[:6]])
    end = np.mean([m.loss for m in res.metrics[-6:]])
    assert end < 0.5 * start


def test_disabled_thresholds_degrade_to_plain_adam():
    _, ds = _tiny_dataset()
    base = dict(total_iters=60, resolution=3, refine_start=10, refine_interval=10,
                refine_end=40, seed=3)
    plain = sv.fit(ds, FitConfig(use_cps=False, **base))
    disabled = sv.fit(ds, FitConfig(use_cps=True, prune_opacity=0.0,
                                    densify_grad=math.inf, **base))
    assert np.array_equal(plain.volume.channel_matrix(),
                          disabled.volume.channel_matrix())
    assert [m.loss for m in plain.metrics] == [m.loss for m in disabled.metrics]
    assert disabled.volume.n_active == disabled.volume.n_points


def test_no_offsets_keeps_centers_on_grid():
    _, ds = _tiny_dataset()
    cfg = FitConfig(total_iters=40, resolution=3, optimize_offsets=False,
                    refine_start=10, refine_interval=10, refine_end=30)
    res = sv.fit(ds, cfg)
    assert np.all(res.volume.offsets == 0.0)


def test_fit_cps_bookkeeping_invariants():
    scene, ds = _tiny_dataset(seed=4, count=16, views=6, size=40)
    cfg = FitConfig(total_iters=150, resolution=4, refine_start=30,
                    refine_interval=30, refine_end=120, seed=1,
                    prune_opacity=0.05, densify_grad=1e-6)
    n_points = 4 ** 3
    frozen: dict[int, np.ndarray] = {}
    refine_events = []

    def on_iteration(it, vol, pool, grads):
        assert vol.n_active + len(pool) == n_points
        inactive = ~vol.active_mask
        # Pooled points receive no gradient...
        assert np.all(grads.offset[inactive] == 0.0)
        assert np.all(grads.opacity_logit[inactive] == 0.0)
        # ...and their attributes stay frozen while pooled.
        channels = vol.channel_matrix()
        for i in list(frozen):
            if vol.active_mask[i]:
                del frozen[i]
            else:
                assert np.array_equal(channels[i], frozen[i])
        for i in np.nonzero(inactive)[0]:
            if i not in frozen:
                frozen[int(i)] = channels[i].copy()

    def on_refine(it, vol, pool):
        refine_events.append((it, vol.n_active, len(pool)))
        assert vol.n_active + len(pool) == n_points

    res = sv.fit(ds, cfg, on_iteration=on_iteration, on_refine=on_refine)
    assert refine_events, "refinement must have triggered"
    assert any(pool_size > 0 for _, _, pool_size in refine_events)
    assert len(res.pool) == 0
    assert res.volume.n_active == n_points


def test_fit_single_gaussian_closed_loop():
    scene = sv.make_scene(sv.SceneSpec(seed=2, gaussian_count=1,
                                       placement_radius=0.25,
                                       scale_range=(0.12, 0.2),
                                       opacity_range=(0.85, 0.95)))
    train = sv.render_dataset(scene, 16, 2.4, 64)
    evalset = sv.render_dataset(scene, 8, 1.6, 64)
    cfg = FitConfig(total_iters=500, resolution=8, seed=0)
    res = sv.fit(train, cfg)
    rows = sv.evaluate_views(res.volume, evalset)
    psnr = float(np.mean([r[2] for r in rows]))
    assert psnr > 30.0


def test_evaluate_views_identity_sentinel():
    scene, _ = _tiny_dataset(seed=6, count=8, views=1)
    cams = sv.sphere_cameras(3, 2.4, 32)
    images = [sv.render(scene, cam, np.ones(3)).rgb for cam in cams]
    ds = sv.ViewSet(cameras=cams, images=images, bounds=scene.bounds)
    rows = sv.evaluate_views(scene, ds)
    for l1, ssim_val, psnr_val in rows:
        assert psnr_val == math.inf
        assert ssim_val == pytest.approx(1.0)
        assert l1 == 0.0


def test_viewspace_accumulator():
    acc = ViewspaceAccumulator(4)
    buf = GradientBuffer.zeros(4)
    buf.viewspace_grad_norm[:] = [1.0, 2.0, 0.0, 4.0]
    buf.visible[:] = [True, True, False, True]
    acc.update(buf)
    acc.update(buf)
    assert np.allclose(acc.mean(), [1.0, 2.0, 0.0, 4.0])
    acc.reset()
    assert np.all(acc.mean() == 0.0)


def test_fit_config_validation():
    with pytest.raises(ConfigError):
        FitConfig(total_iters=-1, resolution=4)
    with pytest.raises(ConfigError):
        FitConfig(total_iters=10, resolution=1)
    with pytest.raises(ConfigError):
        FitConfig(total_iters=10, resolution=4, refine_start=0)
    with pytest.raises(ConfigError):
        FitConfig(total_iters=10, resolution=4, refine_start=5, refine_end=4)
    with pytest.raises(ConfigError):
        FitConfig(total_iters=10, resolution=4, refine_start=5, refine_end=11)
    with pytest.raises(ConfigError):
        dataclasses.replace(FitConfig(total_iters=1, resolution=4), beta1=1.0)
