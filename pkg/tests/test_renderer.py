import math

import numpy as np
import pytest
import torch

from sdfrecon import renderer, scene, synth
from sdfrecon.errors import ValidationError
from sdfrecon.field import sdf_to_density
from sdfrecon.renderer import SamplerConfig, composite, deltas_for, sample_ray, sample_rays

from conftest import make_simple_camera


class ZeroDensityField:
    """Field stub with no matter anywhere."""

    dtype = torch.float64
    leaf = 0.02

    class _Cfg:
        app_use_normal = False

    config = _Cfg()

    @property
    def beta(self):
        return torch.tensor(0.01, dtype=self.dtype)

    def eval_sdf_only(self, x):
        return torch.full((x.shape[0],), 10.0, dtype=self.dtype)

    def eval_sdf(self, x):
        return self.eval_sdf_only(x), torch.zeros((x.shape[0], 0), dtype=self.dtype)

    def density(self, sdf):
        return torch.zeros_like(sdf)

    def normal(self, x, return_flags=False):
        g = torch.zeros_like(x)
        return (g, torch.zeros(x.shape[0], dtype=torch.bool)) if return_flags else g

    def eval_color(self, x, v, n, f):
        return torch.full((x.shape[0], 3), 0.25, dtype=self.dtype)


class BumpField(ZeroDensityField):
    """Density concentrated at a wall z = z0 (an axis-aligned Laplace bump)."""

    def __init__(self, z0=0.0, beta=0.005):
        self.z0 = z0
        self._beta = beta

    @property
    def beta(self):
        return torch.tensor(self._beta, dtype=self.dtype)

    def eval_sdf_only(self, x):
        return x[:, 2] - self.z0

    def density(self, sdf):
        return sdf_to_density(sdf, self.beta)


def vertical_ray(dtype=torch.float64):
    o = torch.tensor([[0.0, 0.0, 0.9]], dtype=dtype)
    d = torch.tensor([[0.0, 0.0, -1.0]], dtype=dtype)
    return o, d, torch.tensor([0.05], dtype=dtype), torch.tensor([1.8], dtype=dtype)


class TestComposite:
    def test_zero_density_is_transparent(self):
        sigma = torch.zeros(1, 16)
        colors = torch.rand(1, 16, 3)
        t = torch.linspace(0.1, 1.0, 16).unsqueeze(0)
        color, depth, mass, trans, weights = composite(sigma, colors, deltas_for(t), t)
        assert torch.allclose(color, torch.zeros_like(color))
        assert float(mass) == 0.0
        assert torch.allclose(trans, torch.ones_like(trans))

    def test_opaque_single_sample(self):
        sigma = torch.tensor([[1e9]])
        colors = torch.tensor([[[0.2, 0.6, 0.9]]])
        t = torch.tensor([[0.5]])
        delta = torch.tensor([[1.0]])
        color, depth, mass, _, _ = composite(sigma, colors, delta, t)
        assert torch.allclose(color, torch.tensor([[0.2, 0.6, 0.9]]))
        assert float(mass) == pytest.approx(1.0)
        assert float(depth) == pytest.approx(0.5)

    def test_two_sample_hand_computation(self):
        # sigma = (0.5, 1.0), delta = (1, 1), c1 red, c2 green.
        sigma = torch.tensor([[0.5, 1.0]], dtype=torch.float64)
        colors = torch.tensor([[[1.0, 0, 0], [0, 1.0, 0]]], dtype=torch.float64)
        t = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        delta = torch.tensor([[1.0, 1.0]], dtype=torch.float64)
        color, _, _, trans, _ = composite(sigma, colors, delta, t)
        o1 = 1 - math.exp(-0.5)
        t2 = math.exp(-0.5)
        o2 = 1 - math.exp(-1.0)
        assert color[0, 0] == pytest.approx(o1, abs=1e-12)  # 0.39347
        assert color[0, 1] == pytest.approx(t2 * o2, abs=1e-12)  # 0.38340
        assert color[0, 2] == 0.0
        assert trans[0, 1] == pytest.approx(t2, abs=1e-12)  # e^-0.5

    def test_transmittance_monotone_weights_bounded_random(self):
        gen = torch.Generator().manual_seed(4)
        sigma = torch.rand((64, 32), generator=gen) * 50
        colors = torch.rand((64, 32, 3), generator=gen)
        t = torch.sort(torch.rand((64, 32), generator=gen) * 2, dim=1).values
        _, _, mass, trans, weights = composite(sigma, colors, deltas_for(t), t)
        assert bool((trans[:, 1:] <= trans[:, :-1] + 1e-7).all())
        assert float(weights.min()) >= 0 and float(weights.max()) <= 1
        assert float(mass.min()) >= 0 and float(mass.max()) <= 1 + 1e-7

    def test_interval_split_invariance(self):
        # Piecewise-constant sigma: splitting an interval must not change
        # the result (additivity of the optical depth).
        sigma_val, c = 2.0, torch.tensor([0.3, 0.5, 0.7])
        t1 = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        sig1 = torch.full((1, 2), sigma_val, dtype=torch.float64)
        col1 = c.double().expand(1, 2, 3)
        delta1 = torch.tensor([[1.0, 1.0]], dtype=torch.float64)
        color1, _, mass1, _, _ = composite(sig1, col1, delta1, t1)

        t2 = torch.tensor([[0.0, 0.5, 1.0]], dtype=torch.float64)
        sig2 = torch.full((1, 3), sigma_val, dtype=torch.float64)
        col2 = c.double().expand(1, 3, 3)
        delta2 = torch.tensor([[0.5, 0.5, 1.0]], dtype=torch.float64)
        color2, _, mass2, _, _ = composite(sig2, col2, delta2, t2)
        assert float(mass1) == pytest.approx(float(mass2), rel=1e-12)
        assert torch.allclose(color1, color2, atol=1e-12)

    def test_quadrature_convergence_to_dense_reference(self):
        # Analytic Laplace-bump density along a fixed ray; 1024 stratified
        # samples must match an 8192-sample dense reference to 1e-3.
        field = BumpField(z0=0.0, beta=0.02)
        o, d, tn, tf = vertical_ray()

        def render_at(n, gen=None):
            t = renderer.stratified_samples(tn, tf, n, gen, torch.float64)
            pts = o + t.unsqueeze(2) * d.unsqueeze(1)
            sdf = field.eval_sdf_only(pts.reshape(-1, 3)).reshape(1, n)
            sigma = field.density(sdf)
            colors = field.eval_color(pts.reshape(-1, 3), None, None, None).reshape(1, n, 3)
            # Position-dependent color so the test is not trivially constant.
            colors = colors * (0.5 + 0.5 * torch.sin(3 * t)).unsqueeze(2)
            return composite(sigma, colors, deltas_for(t), t)[0]

        ref = render_at(8192)
        got = render_at(1024)
        assert float((ref - got).abs().max()) < 1e-3


class TestSampler:
    def test_zero_density_fallback_stratified(self):
        cfg = SamplerConfig(n_probe=32, max_refinement_rounds=2, refine_per_round=8,
                            n_importance=24, n_uniform=8)
        field = ZeroDensityField()
        o, d, tn, tf = vertical_ray()
        gen = torch.Generator().manual_seed(0)
        t, _ = sample_rays(field, o, d, tn, tf, None, cfg, gen)
        n = cfg.n_final
        assert t.shape == (1, n)
        # Every one of the n equal sub-intervals contains at least a sample.
        edges = torch.linspace(float(tn), float(tf), n + 1, dtype=torch.float64)
        counts = torch.histogram(t[0], bins=edges)[0]
        assert bool((counts >= 1).all())

    def test_importance_concentration_near_bump(self):
        beta = 0.004
        field = BumpField(z0=0.0, beta=beta)
        o, d, tn, tf = vertical_ray()
        o = o.repeat(32, 1)
        d = d.repeat(32, 1)
        tn = tn.repeat(32)
        tf = tf.repeat(32)
        cfg = SamplerConfig(n_probe=64, max_refinement_rounds=3, refine_per_round=16,
                            n_importance=48, n_uniform=8)
        gen = torch.Generator().manual_seed(1)
        t, _ = sample_rays(field, o, d, tn, tf, float(beta), cfg, gen)
        # The wall is at t* = 0.9 along the ray; half the importance samples
        # must land within 3 beta of it.
        t_star = 0.9
        near = ((t - t_star).abs() < 3 * beta).float().sum(dim=1)
        frac = near / cfg.n_importance
        assert float(frac.mean()) >= 0.5

    def test_eval_budget_respected(self):
        cfg = SamplerConfig(n_probe=64, max_refinement_rounds=4, refine_per_round=32,
                            n_importance=16, n_uniform=8)
        field = BumpField()
        o, d, tn, tf = vertical_ray()
        _, n_evals = sample_rays(field, o, d, tn, tf, None, cfg, None)
        assert n_evals <= cfg.eval_budget

    def test_refine_budget_config_validated(self):
        with pytest.raises(ValidationError):
            SamplerConfig(n_probe=16, max_refinement_rounds=2, refine_per_round=64)

    def test_cdf_inversion_monotone_and_closed(self):
        gen = torch.Generator().manual_seed(2)
        sigma = torch.rand((8, 33), generator=gen, dtype=torch.float64) * 5
        t = torch.sort(torch.rand((8, 33), generator=gen, dtype=torch.float64), dim=1).values
        cdf = renderer.weight_cdf(sigma, t)
        assert bool((cdf[:, 1:] >= cdf[:, :-1] - 1e-12).all())
        assert torch.allclose(cdf[:, -1], torch.ones(8, dtype=torch.float64))
        assert torch.allclose(cdf[:, 0], torch.zeros(8, dtype=torch.float64))

    def test_single_ray_api_matches_contract(self):
        field = BumpField()
        ray = scene.Ray(
            origin=np.array([0.0, 0.0, 0.9]),
            direction=np.array([0.0, 0.0, -1.0]),
            t_near=0.05,
            t_far=1.8,
        )
        ss = sample_ray(field, ray, cfg=SamplerConfig(n_probe=32, max_refinement_rounds=2,
                                                      refine_per_round=8, n_importance=16,
                                                      n_uniform=8))
        assert bool((ss.t[1:] > ss.t[:-1]).all())
        assert bool((ss.delta > 0).all())
        assert ss.n_evals <= 64
        result = renderer.render_ray(field, ss)
        assert 0.0 <= float(result.opacity_mass) <= 1.0
        assert bool((result.transmittance[1:] <= result.transmittance[:-1] + 1e-7).all())


class TestRenderImage:
    def _plane_scene(self):
        return synth.AnalyticScene(
            primitives=[synth.Primitive("plane", (0, 0, 0.0), (0.0,), (0.6, 0.6, 0.6))]
        )

    def test_opaque_plane_depth_constant(self):
        scene_a = self._plane_scene()
        field = synth.AnalyticField(scene_a, beta=0.002, leaf=0.02)
        cam = make_simple_camera(width=24, height=24, focal=60.0, center=(0, 0, 0.8))
        rgb, depth, alpha = renderer.render_image(
            field, cam, stride=1,
            cfg=SamplerConfig(n_probe=64, max_refinement_rounds=2, refine_per_round=16,
                              n_importance=32, n_uniform=8),
        )
        assert alpha.min() > 0.99
        # Plane at z=0 seen from z=0.8: z-depth 0.8 within 2 leaf sizes.
        assert np.abs(depth - 0.8).max() < 2 * field.leaf

    def test_zero_density_alpha_zero(self):
        field = ZeroDensityField()
        cam = make_simple_camera(width=16, height=16, focal=40.0, center=(0, 0, 2.0))
        rgb, depth, alpha = renderer.render_image(field, cam, stride=2)
        assert float(np.abs(alpha).max()) == 0.0
        assert (depth == -1.0).all()

    def test_stride_subsamples_exactly(self):
        scene_a = self._plane_scene()
        field = synth.AnalyticField(scene_a, beta=0.01, leaf=0.05)
        cam = make_simple_camera(width=16, height=16, focal=40.0, center=(0, 0, 1.5))
        cfg = SamplerConfig(n_probe=32, max_refinement_rounds=2, refine_per_round=8,
                            n_importance=16, n_uniform=8)
        full_rgb, full_depth, _ = renderer.render_image(field, cam, stride=1, cfg=cfg)
        sub_rgb, sub_depth, _ = renderer.render_image(field, cam, stride=4, cfg=cfg)
        assert np.array_equal(sub_rgb, full_rgb[::4, ::4])
        assert np.array_equal(sub_depth, full_depth[::4, ::4])
