"""Dual expert routing at one adapter site: concept-side and image-side
softmax gates fused by a convex weight, plus the weighted expert sum that
joins the backbone sublayer output.

Router matrices are stored column-per-adapter so the frozen columns of
earlier tasks are separate tensors that an optimizer can never touch;
gradient isolation falls out of the tape instead of masking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .adapters import AdapterExpert, Estimator, make_adapter, make_estimator
from .concepts import ConceptMatrix, ConceptProjection, concept_similarity, project_concepts
from .errors import ParameterError, ShapeError

# band edges for calibrated router logits: own-task responses live inside
# [UP_LO, UP_HI], everything else inside [DOWN_LO, DOWN_HI]; the spread
# keeps the routing softmax concentrated on the owner at any adapter count
# while leaving non-owners too flat to fake confident coverage
CALIBRATION_UP_LO = 3.0
CALIBRATION_UP_HI = 3.8
CALIBRATION_DOWN_LO = -0.2
CALIBRATION_DOWN_HI = 0.2


@dataclass
class RoutingDecision:
    """Routing record for one forward batch at one site; rows are samples."""

    site_id: tuple[int, str]
    w_c: np.ndarray       # (B, K) concept-side weights
    w_v: np.ndarray       # (B, K) image-side weights
    w: np.ndarray         # (B, K) fused weights
    s_bar: np.ndarray     # (B, M) pooled concept activations
    concept_logits: np.ndarray  # (B, K) pre-softmax concept scores


@dataclass
class AdapterSite:
    """The expert pool living at one (layer, sublayer) location."""

    site_id: tuple[int, str]
    projection: ConceptProjection
    lam: float
    expandable: bool
    rank: int
    concept_rows: int = 0
    adapters: list[AdapterExpert] = field(default_factory=list)
    estimators: list[Estimator] = field(default_factory=list)
    ac_cols: list[nm.Tensor] = field(default_factory=list)  # each (M, 1)
    r_cols: list[nm.Tensor] = field(default_factory=list)   # each (d, 1)
    # per adapter: its column's concept-evidence logit on its own task,
    # measured at freeze time; the reference scale for lone-expert
    # familiarity, in the same spirit as the estimators' running stats
    gap_refs: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0):
            raise ParameterError(f"lambda must lie in [0, 1], got {self.lam}")

    @property
    def K(self) -> int:
        return len(self.adapters)

    @property
    def width(self) -> int:
        return self.projection.weight.shape[1]

    def _route(self, pooled: nm.Tensor, cols: list[nm.Tensor]) -> tuple[nm.Tensor, nm.Tensor]:
        logits = nm.concat([nm.matmul(pooled, c) for c in cols], axis=1)
        return nm.softmax(logits, axis=1), logits

    def concept_route(self, s_bar: nm.Tensor) -> nm.Tensor:
        """Softmax over s̄ · W_AC; only the newest column can carry gradient."""
        if self.K == 0:
            raise ShapeError(f"site {self.site_id} has no adapters to route over")
        return self._route(s_bar, self.ac_cols)[0]

    def concept_logits_of(self, x: np.ndarray, cm: ConceptMatrix) -> np.ndarray:
        """Pre-softmax concept scores (B, K) of raw site tokens, no tape."""
        if self.K == 0:
            raise ShapeError(f"site {self.site_id} has no adapters to route over")
        with nm.no_grad():
            c_proj = project_concepts(cm, self.projection)
            _, s_bar = concept_similarity(nm.Tensor(x), c_proj)
            logits = nm.concat([nm.matmul(s_bar, c) for c in self.ac_cols], axis=1)
        return logits.data

    def image_route(self, x_bar: nm.Tensor) -> nm.Tensor:
        """Softmax over x̄ · W_r with the same frozen-column isolation."""
        if self.K == 0:
            raise ShapeError(f"site {self.site_id} has no adapters to route over")
        return self._route(x_bar, self.r_cols)[0]

    def forward(self, x: nm.Tensor, base_out: nm.Tensor,
                cm: ConceptMatrix) -> tuple[nm.Tensor, RoutingDecision | None]:
        """Weighted expert sum added onto the sublayer output (batched).

        Returns the decision record for logging and expansion scans, or
        None when the site is empty.
        """
        if x.shape != base_out.shape:
            raise ShapeError(
                f"site input {x.shape} and base output {base_out.shape} disagree")
        if self.K == 0:
            return base_out, None
        c_proj = project_concepts(cm, self.projection)
        _, s_bar = concept_similarity(x, c_proj)
        x_bar = nm.tmean(x, axis=-2)
        w_c, logits_c = self._route(s_bar, self.ac_cols)
        w_v, _ = self._route(x_bar, self.r_cols)
        w = fuse(w_c, w_v, self.lam)
        out = base_out
        for k, adapter in enumerate(self.adapters):
            wk = nm.reshape(nm.narrow(w, 1, k, 1), (-1, 1, 1))
            out = nm.add(out, nm.mul(wk, adapter(x)))
        decision = RoutingDecision(
            site_id=self.site_id,
            w_c=w_c.data.copy(), w_v=w_v.data.copy(), w=w.data.copy(),
            s_bar=s_bar.data.copy(), concept_logits=logits_c.data.copy())
        return out, decision

    def grow(self, rng: nm.Rng, birth_task: int) -> None:
        """Append a newborn expert, estimator and router columns.

        The newcomers are the site's sole trainable set; W_AC starts at
        zeros (uniform prior over concepts), W_r gets a small random break
        so it can diverge from the frozen zero columns.
        """
        d = self.width
        self.adapters.append(make_adapter(d, self.rank, birth_task, rng.child(1)))
        self.estimators.append(make_estimator(d, self.rank, rng.child(2)))
        self.ac_cols.append(nm.Tensor(np.zeros((self.concept_rows, 1)),
                                      requires_grad=True))
        self.r_cols.append(nm.Tensor(rng.child(3).normal((d, 1), std=0.02),
                                     requires_grad=True))
        self.gap_refs.append(0.0)

    def newborn_parameters(self) -> list[nm.Tensor]:
        """Trainable tensors born at the most recent growth."""
        if self.K == 0:
            return []
        ps = self.adapters[-1].parameters() + self.estimators[-1].parameters()
        return ps + [self.ac_cols[-1], self.r_cols[-1]]

    def freeze_latest(self) -> None:
        if self.K == 0:
            return
        self.adapters[-1].freeze()
        self.estimators[-1].freeze()
        self.ac_cols[-1].freeze()
        self.r_cols[-1].freeze()

    def named_parameters(self, prefix: str):
        yield f"{prefix}.phi", self.projection.weight
        for k in range(self.K):
            a, e = self.adapters[k], self.estimators[k]
            yield f"{prefix}.adapter{k}.w_down", a.w_down
            yield f"{prefix}.adapter{k}.w_up", a.w_up
            yield f"{prefix}.estimator{k}.enc", e.enc
            yield f"{prefix}.estimator{k}.dec", e.dec
            yield f"{prefix}.ac_col{k}", self.ac_cols[k]
            yield f"{prefix}.r_col{k}", self.r_cols[k]


def make_site(site_id: tuple[int, str], d: int, d_t: int, m_concepts: int,
              rank: int, lam: float, expandable: bool, rng: nm.Rng) -> AdapterSite:
    from .concepts import make_projection

    proj = make_projection(site_id, d_t, d, rng.child(0))
    return AdapterSite(site_id=site_id, projection=proj, lam=lam,
                       expandable=expandable, rank=rank, concept_rows=m_concepts)


def fuse(w_c: nm.Tensor, w_v: nm.Tensor, lam: float) -> nm.Tensor:
    """Convex combination λ·w_c + (1-λ)·w_v."""
    if not (0.0 <= lam <= 1.0):
        raise ParameterError(f"lambda must lie in [0, 1], got {lam}")
    if w_c.shape != w_v.shape:
        raise ShapeError(f"fusion shapes disagree: {w_c.shape} vs {w_v.shape}")
    return w_c * lam + w_v * (1.0 - lam)


def newborn_calibration(site: AdapterSite, x: np.ndarray, x_null: np.ndarray,
                        x_flat: np.ndarray, x_scr: np.ndarray, x_aug: np.ndarray,
                        perms: list[np.ndarray], cm: ConceptMatrix) -> nm.Tensor:
    """Logistic calibration of the newborn router columns.

    A fresh zero-initialized column scores exactly 0, so a familiarity
    check against later data only means something if the newborn's logit
    clears 0 on the data it was born for and stays near 0 on inputs that
    do not carry this task's identity. The softmax provides no such
    gradient when the site holds one expert (a one-way softmax is
    constant) and only a weak, indirect one otherwise.

    The counterfactuals that shape the columns:

    * `x_null`, an empty scene (the data-independent skeleton every input
      shares) - both columns are pushed to score it at zero;
    * `x_flat`, real scenes with the concept field silenced - only the
      concept column is pushed down on it, pinning that column to
      concept-driven evidence while the image column keeps its
      appearance response;
    * `x_scr`, real scenes whose concept field is spatially scrambled
      (and intensity-warped) - same field statistics, wrong geometry;
      this forbids the lazy "any field present" solution;
    * `x_aug`, real scenes under a random intensity warp - the concept
      column is pulled up on it, so concept familiarity survives
      appearance changes instead of memorizing this task's contrast;
    * `perms`, random permutations of the concept axis applied to s̄ -
      free negatives (same magnitudes, wrong concepts) that keep the
      column's top weights on the task's own concepts, which is what
      affinity reports read off later.

    Familiar data is banded into [UP_LO, UP_HI] and everything else into
    [DOWN_LO, DOWN_HI], so the routing softmax concentrates on owners by
    a fixed logit gap no matter how many experts share the site; all
    softplus arms flatten once their edge is cleared, which keeps logit
    scales self-limiting.
    """

    def both(tokens: np.ndarray):
        xt = nm.Tensor(tokens)
        c_proj = project_concepts(cm, site.projection)
        _, s_bar = concept_similarity(xt, c_proj)
        x_bar = nm.tmean(xt, axis=-2)
        return s_bar, nm.matmul(s_bar, site.ac_cols[-1]), \
            nm.matmul(x_bar, site.r_cols[-1])

    def band_up(logit):
        return nm.tmean(nm.softplus(CALIBRATION_UP_LO - logit)) \
            + nm.tmean(nm.softplus(logit - CALIBRATION_UP_HI))

    def band_down(logit):
        return nm.tmean(nm.softplus(logit - CALIBRATION_DOWN_HI)) \
            + nm.tmean(nm.softplus(CALIBRATION_DOWN_LO - logit))

    s_bar, l_c, l_v = both(x)
    _, n_c, n_v = both(x_null)
    sf_bar, f_c, _ = both(x_flat)
    _, sc_c, _ = both(x_scr)
    sa_bar, a_c, _ = both(x_aug)
    pull_up = band_up(l_c) + band_up(l_v) + band_up(a_c)
    pull_down = band_down(n_c) + band_down(n_v) + band_down(f_c) \
        + band_down(sc_c)
    for perm in perms:
        for sb in (s_bar, sa_bar):
            shuffled = nm.matmul(sb, nm.Tensor(np.eye(cm.M)[:, perm]))
            p_c = nm.matmul(shuffled, site.ac_cols[-1])
            pull_down = pull_down + band_down(p_c)
    # pin the concept column to the measured concept-evidence direction:
    # the mean s̄ gap between real scenes and their field-silenced copies
    # is the fingerprint of this task's concepts at this site, so any
    # column mass orthogonal to it is cross-task leakage
    delta = s_bar.data.mean(axis=0) - sf_bar.data.mean(axis=0)
    norm = float(np.linalg.norm(delta))
    align = nm.Tensor(0.0)
    if norm > 1e-9:
        dhat = nm.Tensor((delta / norm).reshape(-1, 1))
        coef = nm.tsum(nm.mul(site.ac_cols[-1], dhat))
        orth = nm.sub(site.ac_cols[-1], nm.mul(coef, dhat))
        align = nm.tsum(nm.mul(orth, orth))
    return pull_up + pull_down + align


def affinity_report(site: AdapterSite, cm: ConceptMatrix,
                    top_n: int) -> list[list[tuple[str, float]]]:
    """Per adapter: the top-n concepts by router-column weight.

    Ties break toward the lower concept index, so reports are deterministic.
    """
    if top_n > cm.M:
        raise ParameterError(f"top_n={top_n} exceeds concept count M={cm.M}")
    report = []
    for col in site.ac_cols:
        values = col.data.reshape(-1)
        order = sorted(range(len(values)), key=lambda i: (-values[i], i))
        report.append([(cm.concepts[i].name, float(values[i]))
                       for i in order[:top_n]])
    return report
