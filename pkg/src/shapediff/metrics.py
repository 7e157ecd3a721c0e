"""Set-level metrics for generated point clouds: CD, EMD, MMD, COV, 1-NNA, JSD.

Stored values are always raw. The usual presentation scalings (CD x 1e3,
EMD x 10, JSD x 1e2) are applied only by :meth:`MetricReport.to_text`.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .regularizers import chamfer
from .shape import Shape

EMD_CAP = 1024
JSD_RESOLUTION = 28
METRICS = ("CD", "EMD")


class MetricError(ValueError):
    pass


def _pts(s) -> np.ndarray:
    return s.vertices if isinstance(s, Shape) else np.asarray(s, dtype=np.float64)


def emd(P, Q, cap: int = EMD_CAP) -> float:
    """Mean Euclidean distance under the optimal one-to-one matching."""
    P, Q = _pts(P), _pts(Q)
    if len(P) != len(Q):
        raise MetricError(f"EMD needs equal point counts, got {len(P)} and {len(Q)}")
    if len(P) == 0:
        raise MetricError("EMD of empty shapes")
    if len(P) > cap:
        raise MetricError(f"EMD solver cap is {cap} points, got {len(P)}")
    d = P[:, None, :] - Q[None, :, :]
    C = np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])
    col = kernels.assignment(C)
    return math.fsum(C[np.arange(len(P)), col].tolist()) / len(P)


def _metric_fn(metric: str):
    metric = metric.upper()
    if metric == "CD":
        return chamfer
    if metric == "EMD":
        return emd
    raise MetricError(f"unknown metric {metric!r}; expected one of {METRICS}")


def pairwise_distance_matrix(A, B, metric: str = "CD", workers: int = 1) -> np.ndarray:
    if not len(A) or not len(B):
        raise MetricError("pairwise distances need non-empty sets")
    fn = _metric_fn(metric)
    A = [_pts(a) for a in A]
    B = [_pts(b) for b in B]
    jobs = [(a, b) for a in range(len(A)) for b in range(len(B))]
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            vals = list(ex.map(lambda ab: fn(A[ab[0]], B[ab[1]]), jobs))
    else:
        vals = [fn(A[a], B[b]) for a, b in jobs]
    return np.array(vals, dtype=np.float64).reshape(len(A), len(B))


def mmd_cov_from_matrix(D: np.ndarray) -> tuple[float, float]:
    """``D[g, r]`` holds generated-to-reference distances."""
    mmd = float(D.min(axis=0).mean())
    cov = len(np.unique(D.argmin(axis=1))) / D.shape[1]
    return mmd, float(cov)


def mmd_cov(generated, reference, metric: str = "CD") -> tuple[float, float]:
    return mmd_cov_from_matrix(pairwise_distance_matrix(generated, reference, metric))


def one_nna_from_matrices(Dgg, Dgr, Drr) -> float:
    ng, nr = Dgg.shape[0], Drr.shape[0]
    if ng < 2 or nr < 2:
        raise MetricError("1-NNA needs at least two shapes per set")
    D = np.block([[Dgg, Dgr], [Dgr.T, Drr]]).astype(np.float64)
    np.fill_diagonal(D, np.inf)
    nn = D.argmin(axis=1)  # argmin returns the lowest index among ties
    label = np.r_[np.zeros(ng, bool), np.ones(nr, bool)]
    return float((label[nn] == label).mean())


def one_nna(generated, reference, metric: str = "CD") -> float:
    if len(generated) < 2 or len(reference) < 2:
        raise MetricError("1-NNA needs at least two shapes per set")
    return one_nna_from_matrices(
        pairwise_distance_matrix(generated, generated, metric),
        pairwise_distance_matrix(generated, reference, metric),
        pairwise_distance_matrix(reference, reference, metric),
    )


def _histogram(points: np.ndarray, lo, span, resolution: int) -> np.ndarray:
    cell = np.floor((points - lo) / span * resolution).astype(np.int64)
    cell = np.clip(cell, 0, resolution - 1)
    flat = (cell[:, 0] * resolution + cell[:, 1]) * resolution + cell[:, 2]
    h = np.bincount(flat, minlength=resolution ** 3).astype(np.float64)
    return h / h.sum()


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in nats with ``0 ln 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)

    def kl(a):
        mask = a > 0
        return float((a[mask] * np.log(a[mask] / m[mask])).sum())

    return max(0.0, 0.5 * kl(p) + 0.5 * kl(q))


def jsd(generated, reference, resolution: int = JSD_RESOLUTION) -> float:
    if resolution < 2:
        raise MetricError("JSD grid resolution must be >= 2")
    if not len(generated) or not len(reference):
        raise MetricError("JSD needs non-empty sets")
    g = np.concatenate([_pts(s) for s in generated])
    r = np.concatenate([_pts(s) for s in reference])
    if not len(g) or not len(r):
        raise MetricError("JSD needs at least one point per set")
    both = np.concatenate([g, r])
    lo = both.min(axis=0)
    span = both.max(axis=0) - lo
    span[span <= 0] = 1.0
    return js_divergence(_histogram(g, lo, span, resolution), _histogram(r, lo, span, resolution))


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

_SCALE = {"mmd_cd": 1e3, "mmd_emd": 10.0, "jsd": 1e2}


@dataclass
class MetricReport:
    mmd_cd: float
    cov_cd: float
    one_nna_cd: float | None
    jsd: float
    n_generated: int
    n_reference: int
    mmd_emd: float | None = None
    cov_emd: float | None = None
    one_nna_emd: float | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        """Flat ``key=value`` lines with the presentation scalings applied."""
        lines = []
        for key in ("mmd_cd", "cov_cd", "one_nna_cd", "mmd_emd", "cov_emd", "one_nna_emd", "jsd"):
            val = getattr(self, key)
            if val is None:
                lines.append(f"{key}=skipped")
                continue
            scale = _SCALE.get(key)
            if scale:
                lines.append(f"{key}_x{scale:g}={val * scale:.6g}")
            else:
                lines.append(f"{key}={val:.6g}")
        lines.append(f"n_generated={self.n_generated}")
        lines.append(f"n_reference={self.n_reference}")
        for k in sorted(self.config):
            lines.append(f"config.{k}={self.config[k]}")
        return "\n".join(lines) + "\n"


def evaluate(generated, reference, *, resolution: int = JSD_RESOLUTION, emd_cap: int = EMD_CAP,
             workers: int = 1) -> tuple[MetricReport, list[str]]:
    """Full report plus a list of warnings (EMD is skipped on unequal point counts)."""
    if not len(generated) or not len(reference):
        raise MetricError("evaluation needs non-empty generated and reference sets")
    warnings = []
    cd = {k: pairwise_distance_matrix(a, b, "CD", workers) for k, (a, b) in
          {"gg": (generated, generated), "gr": (generated, reference), "rr": (reference, reference)}.items()}
    mmd_c, cov_c = mmd_cov_from_matrix(cd["gr"])
    nna_c = one_nna_from_matrices(cd["gg"], cd["gr"], cd["rr"]) \
        if min(len(generated), len(reference)) >= 2 else None
    counts = {len(_pts(s)) for s in list(generated) + list(reference)}
    emd_vals = (None, None, None)
    if len(counts) != 1:
        warnings.append(f"EMD skipped: unequal point counts {sorted(counts)}")
    elif counts.pop() > emd_cap:
        warnings.append(f"EMD skipped: point count above solver cap {emd_cap}")
    else:
        em = {k: pairwise_distance_matrix(a, b, "EMD", workers) for k, (a, b) in
              {"gg": (generated, generated), "gr": (generated, reference), "rr": (reference, reference)}.items()}
        m, c = mmd_cov_from_matrix(em["gr"])
        nna = one_nna_from_matrices(em["gg"], em["gr"], em["rr"]) \
            if min(len(generated), len(reference)) >= 2 else None
        emd_vals = (m, c, nna)
    report = MetricReport(
        mmd_cd=mmd_c, cov_cd=cov_c, one_nna_cd=nna_c, jsd=jsd(generated, reference, resolution),
        n_generated=len(generated), n_reference=len(reference),
        mmd_emd=emd_vals[0], cov_emd=emd_vals[1], one_nna_emd=emd_vals[2],
        config={"jsd_resolution": resolution, "emd_solver": f"exact-assignment(cap={emd_cap})",
                "cd": "sum of squared nearest distances", "emd": "mean matched euclidean distance"},
    )
    return report, warnings
