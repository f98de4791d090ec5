"""Toy-scale check of the NTK argument for poison-sample efficiency.

``kernel_confidence`` evaluates the RBF kernel-regression confidence on the
target class exactly; ``closed_form_score`` is the sum of
1 / ((x'_i - x_i) . (x'_i - x'_t)) that the confidence is claimed to track.
``verify_theorem`` correlates the two over families of random scenarios.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import logsumexp
from scipy.stats import spearmanr


class DegenerateScenario(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class KernelScenario:
    """Clean points with labels, poisons with their clean sources, and test points.

    ``poison_sources[i]`` is the clean image x_i that ``poison_x[i]`` (x'_i) was
    made from. All poisons carry ``target``.
    """

    clean_x: np.ndarray
    clean_y: np.ndarray
    poison_x: np.ndarray
    poison_sources: np.ndarray
    test_x: np.ndarray
    target: int = 1
    gamma: float = 1.0

    def __post_init__(self):
        for name in ("clean_x", "poison_x", "poison_sources", "test_x"):
            arr = np.atleast_2d(np.asarray(getattr(self, name), dtype=np.float64))
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "clean_y", np.asarray(self.clean_y, dtype=np.int64).reshape(-1))
        dims = {a.shape[1] for a in (self.clean_x, self.poison_x, self.poison_sources, self.test_x) if a.size}
        if len(dims) > 1:
            raise ValueError("all vectors must share one dimension")
        if len(self.clean_y) != len(self.clean_x):
            raise ValueError("one label per clean point")
        if self.poison_x.shape != self.poison_sources.shape:
            raise ValueError("every poison needs its source")
        if not (math.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError("gamma must be finite and positive")

    @property
    def n_clean(self) -> int:
        return 0 if self.clean_x.size == 0 else len(self.clean_x)

    @property
    def n_poison(self) -> int:
        return 0 if self.poison_x.size == 0 else len(self.poison_x)


def _log_kernel(gamma: float, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """log K(a_t, b_j) = -2 gamma ||a_t - b_j||^2 as a (T, J) matrix."""
    if b.size == 0:
        return np.zeros((len(a), 0))
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return -2.0 * gamma * d2


def kernel_confidence(s: KernelScenario, log_domain: bool = True) -> np.ndarray:
    """Target-class confidence of RBF kernel regression at each test point.

    phi = (sum_{clean, y=k} K + sum_poison K) / (sum_clean K + sum_poison K).
    The log-domain evaluation is exact up to rounding even where every kernel
    weight would underflow; with ``log_domain=False`` such points raise.
    """
    lk_clean = _log_kernel(s.gamma, s.test_x, s.clean_x if s.n_clean else np.zeros((0, 0)))
    lk_poison = _log_kernel(s.gamma, s.test_x, s.poison_x if s.n_poison else np.zeros((0, 0)))
    is_target = s.clean_y == s.target
    num_terms = np.concatenate([lk_clean[:, is_target], lk_poison], axis=1)
    den_terms = np.concatenate([lk_clean, lk_poison], axis=1)
    if den_terms.shape[1] == 0:
        raise DegenerateScenario("scenario has no training points")
    if not log_domain:
        den = np.exp(den_terms).sum(1)
        if np.any(den == 0):
            raise DegenerateScenario("all kernel weights underflow at some test point")
        return np.exp(num_terms).sum(1) / den
    if num_terms.shape[1] == 0:
        return np.zeros(len(s.test_x))
    return np.exp(logsumexp(num_terms, axis=1) - logsumexp(den_terms, axis=1))


class ClosedFormScore(NamedTuple):
    scores: np.ndarray
    singular: np.ndarray


def closed_form_score(s: KernelScenario) -> ClosedFormScore:
    """Sum over poisons of 1 / ((x'_i - x_i) . (x'_i - x'_t)) per test point.

    Terms whose dot product is exactly zero are excluded and counted in
    ``singular`` rather than clamped.
    """
    disp = s.poison_x - s.poison_sources
    rel = s.poison_x[None, :, :] - s.test_x[:, None, :]
    dots = np.einsum("pd,tpd->tp", disp, rel)
    singular = dots == 0
    with np.errstate(divide="ignore"):
        terms = np.where(singular, 0.0, 1.0 / np.where(singular, 1.0, dots))
    return ClosedFormScore(terms.sum(1), singular.sum(1))


# ---------------------------------------------------------------------------
# scenario families
# ---------------------------------------------------------------------------


def _unit(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass(frozen=True)
class Geometry:
    """Shape of one scenario before its two scale knobs are applied.

    Poison i sits at test + diversity * radius_i * u_i and its clean source at
    poison - similarity_gap * v_i, where v_i leans toward u_i (v_i . u_i > 0).
    """

    test: np.ndarray
    u: np.ndarray
    v: np.ndarray
    radius: np.ndarray

    @classmethod
    def draw(cls, rng: np.random.Generator, n: int, d: int) -> "Geometry":
        test = rng.uniform(0.0, 1.0, size=d)
        u = _unit(rng, n, d)
        if d == 1:
            v = u.copy()
        else:
            v = u + 0.5 * _unit(rng, n, d)
            v /= np.linalg.norm(v, axis=1, keepdims=True)
        radius = rng.uniform(0.5, 1.5, size=n)
        return cls(test, u, v, radius)

    def scenario(self, similarity_gap: float, diversity: float, gamma: float) -> KernelScenario:
        poison = self.test + diversity * self.radius[:, None] * self.u
        source = poison - similarity_gap * self.v
        # N = P: the clean set is exactly the sources, all of a non-target class
        return KernelScenario(source, np.zeros(len(source), dtype=np.int64), poison, source,
                              self.test[None, :], target=1, gamma=gamma)


def _spearman(a, b) -> Optional[float]:
    a = np.asarray(a)
    b = np.asarray(b)
    if len(a) < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    return float(spearmanr(a, b).statistic)


def _random_family(rng, trials, n, d, gamma, gap_range, div_range, target_points=0) -> dict:
    conf, score, regime, singular, dropped = [], [], [], 0, []
    for _ in range(trials):
        geo = Geometry.draw(rng, n, d)
        gap = float(np.exp(rng.uniform(*np.log(gap_range))))
        div = float(np.exp(rng.uniform(*np.log(div_range))))
        sc = geo.scenario(gap, div, gamma)
        if target_points:
            extra = rng.uniform(0.0, 1.0, size=(target_points, d))
            sc = KernelScenario(np.vstack([sc.clean_x, extra]),
                                np.concatenate([sc.clean_y, np.full(target_points, sc.target)]),
                                sc.poison_x, sc.poison_sources, sc.test_x, sc.target, gamma)
            lk = _log_kernel(gamma, sc.test_x, sc.clean_x)[0]
            lp = _log_kernel(gamma, sc.test_x, sc.poison_x)[0]
            num = np.concatenate([lk[sc.clean_y == sc.target], lp])
            dropped.append(float(np.exp(logsumexp(lk[sc.clean_y == sc.target]) - logsumexp(num))))
        cf = closed_form_score(sc)
        conf.append(float(kernel_confidence(sc)[0]))
        score.append(float(cf.scores[0]))
        singular += int(cf.singular.sum())
        regime.append(target_points == 0 and gap <= 0.1 * div * geo.radius.min())
    out = {"spearman": _spearman(conf, score), "n": trials, "size": n,
           "in_regime": bool(all(regime)), "singular_terms": singular}
    if target_points:
        out["dropped_term_share"] = float(np.mean(dropped))
    return out


def verify_theorem(trials: int = 200, dims=(1, 2, 8), gamma: float = 1.0, sizes=(4, 8, 16, 32, 64),
                   rng: Optional[np.random.Generator] = None, sweep_points: int = 25) -> dict:
    """Correlate kernel confidence with the closed-form score across families.

    Per dimension and per N = P the families are:
      ``joint``         gap and diversity drawn independently, small gaps
      ``wide``          same with gaps comparable to the poison spread
      ``target_clean``  ``joint`` plus N extra target-class clean points, which
                        the closed form ignores; reports their numerator share
    and per dimension:
      ``similarity``    diversity fixed, gap shrinking; confidence must rise
      ``diversity``     gap fixed, diversity varied
      ``degenerate``    identical scenarios; correlation is undefined
    ``in_regime`` marks families where N = P and every gap is at most a tenth of
    the poison-to-test distance, i.e. where the proof's approximations hold.
    The closed form is a sum over P terms, so families never mix sizes.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    report: dict = {"gamma": gamma, "trials": trials, "dims": list(dims), "sizes": list(sizes), "families": {}}
    small_gap, wide_gap, div_range = (0.001, 0.01), (0.05, 0.5), (0.25, 1.0)
    for d in dims:
        fam: dict = {}
        for n in sizes:
            fam[f"joint/{n}"] = _random_family(rng, trials, n, d, gamma, small_gap, div_range)
            fam[f"wide/{n}"] = _random_family(rng, trials, n, d, gamma, wide_gap, div_range)
            fam[f"target_clean/{n}"] = _random_family(rng, trials, n, d, gamma, small_gap, div_range, n)

        geo = Geometry.draw(rng, int(sizes[len(sizes) // 2]), d)
        gaps = np.geomspace(0.1, 0.001, sweep_points)
        conf = np.array([kernel_confidence(geo.scenario(g, 0.5, gamma))[0] for g in gaps])
        score = np.array([closed_form_score(geo.scenario(g, 0.5, gamma)).scores[0] for g in gaps])
        fam["similarity"] = {"spearman": _spearman(conf, score), "n": sweep_points,
                             "monotone_violations": int(np.sum(np.diff(conf) <= 0)),
                             "confidence": conf.tolist()}

        divs = np.geomspace(0.25, 1.0, sweep_points)
        conf = [kernel_confidence(geo.scenario(0.005, v, gamma))[0] for v in divs]
        score = [closed_form_score(geo.scenario(0.005, v, gamma)).scores[0] for v in divs]
        fam["diversity"] = {"spearman": _spearman(conf, score), "n": sweep_points}

        same = geo.scenario(0.005, 0.5, gamma)
        conf = [kernel_confidence(same)[0]] * 5
        score = [closed_form_score(same).scores[0]] * 5
        rho = _spearman(conf, score)
        fam["degenerate"] = {"spearman": rho, "n": 5, "status": "undefined" if rho is None else "ok"}
        report["families"][str(d)] = fam
    regime = [f["spearman"] for fams in report["families"].values() for f in fams.values()
              if f.get("in_regime")]
    report["min_regime_spearman"] = min(regime) if regime else None
    report["monotone_violations"] = sum(f["similarity"]["monotone_violations"] for f in report["families"].values())
    return report
