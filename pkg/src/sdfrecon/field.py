"""The learnable implicit scene.

A multi-resolution feature-grid encoding feeds a geometry network producing
(signed distance, feature vector); an appearance network maps (position, view
direction, normal, feature) to rgb. The signed distance converts to volume
density through a Laplace-CDF mapping whose sharpness beta is itself a
learnable parameter (stored as log_beta so beta stays positive).

Parameters live in a flat name -> tensor dict so optimizers, checkpoints and
finite-difference checks can address every coordinate uniformly. Evaluation
is pure given the parameters; concurrent reads are safe, updates happen in a
single-writer phase.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

from .errors import NumericFaultError, ValidationError

# Per-axis multipliers for hashed grid levels (identity on x keeps dense and
# hashed indexing consistent on the first axis).
HASH_PRIMES = (1, 2654435761, 805459861)

DOMAIN_EPS = 1e-6


def sdf_to_density(d, beta):
    """Map signed distance to volume density: sigma = (1/beta) * Psi_beta(-d).

    Psi_beta is the CDF of a zero-mean Laplace distribution with scale beta.
    Computed branchlessly from exp(-|d|/beta), which never overflows.
    Accepts tensors or floats; beta must be positive.
    """
    is_tensor = torch.is_tensor(d) or torch.is_tensor(beta)
    d_t = d if torch.is_tensor(d) else torch.as_tensor(d, dtype=torch.float64)
    beta_t = beta if torch.is_tensor(beta) else torch.as_tensor(beta, dtype=d_t.dtype)
    decay = torch.exp(-torch.abs(d_t) / beta_t)
    psi = torch.where(d_t >= 0, 0.5 * decay, 1.0 - 0.5 * decay)
    sigma = psi / beta_t
    return sigma if is_tensor else float(sigma)


@dataclass(frozen=True)
class FieldConfig:
    """Architecture and initialization settings.

    ``leaf_size`` is the target cell edge of the finest grid level in
    normalized units; set it to the dataset GSD after normalization. The
    number of grid levels grows geometrically from ``base_resolution`` up to
    the resolution that meets the leaf size.
    """

    n_levels: int = 8
    base_resolution: int = 16
    leaf_size: float = 1.0 / 64.0
    table_size_log2: int = 19
    feature_dim: int = 2
    geo_hidden: int = 256
    geo_layers: int = 2
    geo_feature_dim: int = 15
    app_hidden: int = 256
    app_layers: int = 2
    app_use_normal: bool = True
    app_use_viewdir: bool = True
    beta0: float = 1e-3
    sdf_bias: float = 0.1
    dtype: str = "float32"

    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def level_resolutions(self) -> list[int]:
        finest = max(self.base_resolution, math.ceil(2.0 / self.leaf_size))
        if self.n_levels == 1:
            return [finest]
        growth = (finest / self.base_resolution) ** (1.0 / (self.n_levels - 1))
        res = [int(round(self.base_resolution * growth**i)) for i in range(self.n_levels)]
        res[-1] = finest
        for i in range(1, self.n_levels):
            res[i] = max(res[i], res[i - 1])
        return res

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "FieldConfig":
        return FieldConfig(**d)


@dataclass
class FieldSample:
    """Field outputs at one position (used by the single-point API)."""

    position: torch.Tensor
    sdf: float
    feature: torch.Tensor
    density: float
    color: tuple | None = None
    normal: torch.Tensor | None = None


def _kaiming_uniform(gen, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return (torch.rand(shape, generator=gen, dtype=dtype) * 2 - 1) * bound


class SdfField:
    """Feature grids + geometry/appearance MLPs + log_beta.

    All learnable state is in ``self.params`` (name -> tensor with
    requires_grad). Grid levels whose corner count fits the table are densely
    indexed; finer levels share table rows through a spatial hash.
    """

    def __init__(self, config: FieldConfig, seed: int = 0):
        self.config = config
        self.dtype = config.torch_dtype()
        self.resolutions = config.level_resolutions()
        table_size = 1 << config.table_size_log2
        self.level_dense = [(r + 1) ** 3 <= table_size for r in self.resolutions]
        self.level_rows = [(r + 1) ** 3 if dense else table_size
                           for r, dense in zip(self.resolutions, self.level_dense)]

        gen = torch.Generator().manual_seed(seed)
        p: dict[str, torch.Tensor] = {}
        for lv, rows in enumerate(self.level_rows):
            p[f"grid_{lv}"] = (torch.rand((rows, config.feature_dim), generator=gen,
                                          dtype=self.dtype) * 2 - 1) * 1e-4

        enc_dim = config.n_levels * config.feature_dim
        dims = [enc_dim] + [config.geo_hidden] * config.geo_layers + [1 + config.geo_feature_dim]
        for i in range(len(dims) - 1):
            p[f"geo_w{i}"] = _kaiming_uniform(gen, (dims[i], dims[i + 1]), dims[i], self.dtype)
            p[f"geo_b{i}"] = torch.zeros(dims[i + 1], dtype=self.dtype)
        # Positive initial SDF bias = empty-scene prior.
        p[f"geo_b{len(dims) - 2}"].data[0] = config.sdf_bias

        app_in = (
            3
            + (3 if config.app_use_viewdir else 0)
            + (3 if config.app_use_normal else 0)
            + config.geo_feature_dim
        )
        dims = [app_in] + [config.app_hidden] * config.app_layers + [3]
        for i in range(len(dims) - 1):
            p[f"app_w{i}"] = _kaiming_uniform(gen, (dims[i], dims[i + 1]), dims[i], self.dtype)
            p[f"app_b{i}"] = torch.zeros(dims[i + 1], dtype=self.dtype)

        p["log_beta"] = torch.tensor(math.log(config.beta0), dtype=self.dtype)
        for t in p.values():
            t.requires_grad_(True)
        self.params = p

    # -- parameter plumbing -------------------------------------------------

    def param_names(self) -> list[str]:
        return list(self.params)

    def zero_like_params(self) -> dict[str, torch.Tensor]:
        return {k: torch.zeros_like(v) for k, v in self.params.items()}

    def detach_clone_params(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.params.items()}

    def load_param_values(self, values: dict[str, torch.Tensor]) -> None:
        if set(values) != set(self.params):
            raise ValidationError("parameter name mismatch when loading values")
        with torch.no_grad():
            for k, v in self.params.items():
                src = values[k].to(self.dtype)
                if src.shape != v.shape:
                    raise ValidationError(f"shape mismatch for {k}: {src.shape} vs {v.shape}")
                v.copy_(src)

    def param_checksum(self) -> float:
        with torch.no_grad():
            return float(sum(v.double().abs().sum() for v in self.params.values()))

    @property
    def beta(self) -> torch.Tensor:
        return torch.exp(self.params["log_beta"])

    @property
    def leaf(self) -> float:
        """Cell edge of the finest grid level (normalized units)."""
        return 2.0 / self.resolutions[-1]

    # -- encoding and networks ----------------------------------------------

    def _check_domain(self, x: torch.Tensor) -> None:
        if x.numel() and float(x.abs().max()) > 1.0 + DOMAIN_EPS:
            raise ValidationError("position outside the [-1,1]^3 working domain")

    def hash_encode(self, x: torch.Tensor) -> torch.Tensor:
        """Concatenated trilinear feature lookups, one block per level.

        ``x``: (N, 3) in [-1, 1]. Output: (N, n_levels * feature_dim).
        """
        self._check_domain(x)
        n = x.shape[0]
        outs = []
        corner = torch.tensor(
            [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)],
            dtype=torch.long,
        )  # (8, 3)
        for lv, res in enumerate(self.resolutions):
            g = (x + 1.0) * (0.5 * res)  # cell units in [0, res]
            cell = g.floor().long().clamp_(0, res - 1)
            frac = g - cell.to(g.dtype)
            idx3 = cell.unsqueeze(1) + corner.unsqueeze(0)  # (N, 8, 3)
            if self.level_dense[lv]:
                stride = res + 1
                flat = idx3[..., 0] + stride * (idx3[..., 1] + stride * idx3[..., 2])
            else:
                mask = self.level_rows[lv] - 1
                flat = (
                    idx3[..., 0] * HASH_PRIMES[0]
                    ^ idx3[..., 1] * HASH_PRIMES[1]
                    ^ idx3[..., 2] * HASH_PRIMES[2]
                ) & mask
            feats = self.params[f"grid_{lv}"][flat.reshape(-1)].reshape(n, 8, -1)
            w = torch.where(corner.bool().unsqueeze(0), frac.unsqueeze(1), 1.0 - frac.unsqueeze(1))
            weight = w.prod(dim=2, keepdim=True).transpose(1, 2)  # (N, 1, 8)
            outs.append(torch.bmm(weight, feats).squeeze(1))
        return torch.cat(outs, dim=1)

    def _geo_forward(self, enc: torch.Tensor) -> torch.Tensor:
        h = enc
        for i in range(self.config.geo_layers):
            h = torch.nn.functional.softplus(
                h @ self.params[f"geo_w{i}"] + self.params[f"geo_b{i}"], beta=100.0
            )
        i = self.config.geo_layers
        return h @ self.params[f"geo_w{i}"] + self.params[f"geo_b{i}"]

    def eval_sdf(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Signed distance (negative inside) and geometry feature at (N, 3) points."""
        out = self._geo_forward(self.hash_encode(x))
        return out[:, 0], out[:, 1:]

    def eval_sdf_only(self, x: torch.Tensor) -> torch.Tensor:
        return self.eval_sdf(x)[0]

    def density(self, sdf: torch.Tensor) -> torch.Tensor:
        return sdf_to_density(sdf, self.beta)

    def normal(self, x: torch.Tensor, return_flags: bool = False):
        """Central-difference gradient of the SDF with step leaf/2.

        Stencil points falling outside the domain are clamped to the boundary,
        which degrades to a one-sided difference there (flagged when
        ``return_flags``). The result is the raw gradient, not normalized.
        """
        h = self.leaf / 2.0
        n = x.shape[0]
        eye = torch.eye(3, dtype=x.dtype)
        xp = (x.unsqueeze(1) + h * eye).clamp(-1.0, 1.0)  # (N, 3, 3)
        xm = (x.unsqueeze(1) - h * eye).clamp(-1.0, 1.0)
        stacked = torch.cat([xp.reshape(-1, 3), xm.reshape(-1, 3)], dim=0)
        vals = self.eval_sdf_only(stacked)
        fp = vals[: 3 * n].reshape(n, 3)
        fm = vals[3 * n :].reshape(n, 3)
        span = (xp - xm).diagonal(dim1=1, dim2=2)  # (N, 3) actual step per axis
        grad = (fp - fm) / span
        if return_flags:
            clamped = ((x + h * eye.sum(0) > 1.0) | (x - h * eye.sum(0) < -1.0)).any(dim=1)
            return grad, clamped
        return grad

    def eval_color(
        self,
        x: torch.Tensor,
        view_dir: torch.Tensor,
        normal: torch.Tensor | None,
        feature: torch.Tensor,
    ) -> torch.Tensor:
        """Appearance network: rgb in [0, 1]^3 via terminal sigmoid.

        View-direction and normal conditioning follow the field config; a
        Lambertian profile (no view dependence) drops the view input.
        """
        parts = [x]
        if self.config.app_use_viewdir:
            parts.append(view_dir)
        if self.config.app_use_normal:
            if normal is None:
                raise ValidationError("field configured with normal-conditioned appearance")
            parts.append(normal)
        parts.append(feature)
        h = torch.cat(parts, dim=1)
        for i in range(self.config.app_layers):
            h = torch.relu(h @ self.params[f"app_w{i}"] + self.params[f"app_b{i}"])
        i = self.config.app_layers
        return torch.sigmoid(h @ self.params[f"app_w{i}"] + self.params[f"app_b{i}"])

    def sample_at(self, position, with_normal: bool = False) -> FieldSample:
        """Convenience single-point evaluation (not the training hot path)."""
        x = torch.as_tensor(position, dtype=self.dtype).reshape(1, 3)
        with torch.no_grad():
            sdf, feat = self.eval_sdf(x)
            nrm = self.normal(x)[0] if with_normal else None
            dens = float(self.density(sdf)[0])
        return FieldSample(
            position=x[0], sdf=float(sdf[0]), feature=feat[0], density=dens, normal=nrm
        )


def evaluate_with_gradients(field: SdfField, batch, weights, stage: int):
    """Loss terms and exact reverse-mode parameter gradients for one batch.

    ``batch`` is a :class:`~sdfrecon.losses.LossBatch` with all sample
    positions fixed; the result is deterministic given (batch, parameters).
    Terms with zero weight are skipped (their logged value is 0). Returns
    ``(terms: dict[str, float], grads: dict[str, Tensor])``; a non-finite
    term or gradient raises :class:`NumericFaultError` naming the culprit.
    """
    from . import losses as losses_mod

    terms_t = losses_mod.compute_loss_terms(field, batch, weights, stage)
    total = losses_mod.total_loss(terms_t, weights, stage)

    terms = {k: float(v.detach()) for k, v in terms_t.items()}
    terms["total"] = float(total.detach())
    for name, value in terms.items():
        if not math.isfinite(value):
            raise NumericFaultError(f"non-finite loss term '{name}'")

    params = list(field.params.values())
    if total.requires_grad:
        grad_list = torch.autograd.grad(total, params, allow_unused=True)
    else:  # all weights zero: nothing in the graph
        grad_list = [None] * len(params)
    grads = {}
    for (name, p), g in zip(field.params.items(), grad_list):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NumericFaultError(f"non-finite gradient for parameter '{name}'")
        grads[name] = g
    return terms, grads
