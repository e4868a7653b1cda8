"""Markov-chain training engine: SGLD updates plus split/merge row moves.

Each step draws one transition kind from a fixed categorical mixture.
Updates follow stochastic gradient Langevin dynamics per parameter group
and are always accepted. Split moves give one Gaussian a privately
perturbed copy of its codebook row; merge moves collapse a split-lineage
child row back into its parent. Both carry exact closed-form acceptance
probabilities built from the proposal-density ratio q_sm and the
codebook-size penalty factor e^{+-lambda}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .metrics import recon_loss, recon_loss_grad, total_loss
from .model import ModelState, densify, validate_state
from .render import GradientSet, rasterize_backward, rasterize_forward


class SamplerError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    # Transition mixture.
    p_update: float = 0.98
    p_split: float = 0.01
    p_merge: float = 0.01
    # Split/merge proposal widths, per codebook.
    eps_split_sh: float = 0.1
    eps_merge_sh: float = 0.05
    eps_split_sr: float = 0.1
    eps_merge_sr: float = 0.05
    # Codebook-size penalties.
    lambda_sh: float = 2.3
    lambda_sr: float = 3.0
    lambda_ssim: float = 0.2
    # SGLD step sizes per parameter group.
    step_pos: float = 0.5
    step_opacity: float = 10.0
    step_sh: float = 20.0
    step_sr: float = 2.0
    # SGLD noise multipliers per group (0 disables the Langevin noise).
    noise_pos: float = 1.0
    noise_opacity: float = 0.0
    noise_sh: float = 0.0
    noise_sr: float = 0.0
    # Batched candidate fraction for split and merge steps.
    split_fraction: float = 0.01
    # Densification schedule.
    densify_every: int = 100
    densify_growth: float = 0.05
    densify_jitter: float = 0.02
    gaussian_cap: int = 2_000_000
    # Restores the dropped Gaussian-normalization factor in q_sm.
    normalization_correction: bool = False
    # Renders one view inside accept decisions to use the true loss ratio.
    exact_ratio: bool = False
    seed: int = 0

    def validate(self) -> None:
        if abs(self.p_update + self.p_split + self.p_merge - 1.0) > 1e-12:
            raise ValueError("mixture probabilities must sum to 1")
        for name in ("eps_split_sh", "eps_merge_sh", "eps_split_sr", "eps_merge_sr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def for_synthetic_fixture(cls, seed: int = 0) -> "SamplerConfig":
        """Profile tuned for the 64-Gaussian synthetic fixture.

        Larger gradient steps than the conservative library defaults and no
        Langevin noise, so a short desk-scale run converges; everything else
        keeps its default.
        """
        return cls(step_pos=4.0, step_opacity=80.0, step_sh=150.0, step_sr=15.0,
                   noise_pos=0.0, gaussian_cap=256, seed=seed)

    def eps_for(self, which: str) -> tuple[float, float]:
        if which == "sh":
            return self.eps_split_sh, self.eps_merge_sh
        if which == "sr":
            return self.eps_split_sr, self.eps_merge_sr
        raise ValueError(f"unknown codebook {which!r}")

    def lambda_for(self, which: str) -> float:
        return self.lambda_sh if which == "sh" else self.lambda_sr


@dataclass
class TransitionRecord:
    iteration: int
    kind: str                 # update | split | merge
    codebook: str             # sh | sr | '-'
    attempts: int = 0
    accepts: int = 0
    delta_sh: int = 0
    delta_sr: int = 0
    live_sh: int = 0
    live_sr: int = 0
    recon: float = float("nan")
    total: float = float("nan")
    psnr: float = float("nan")
    accept_probs: list = field(default_factory=list)


def choose_transition(config: SamplerConfig, rng: np.random.Generator) -> str:
    r = rng.random()
    if r < config.p_update:
        return "update"
    if r < config.p_update + config.p_split:
        return "split"
    return "merge"


def q_sm(u: np.ndarray, eps_split: float, eps_merge: float,
         correction: bool = False) -> float:
    """Proposal-ratio factor exp(-|u|^2/2 (1/eps_split^2 - 1/eps_merge^2)).

    With the correction flag the dropped normalization (eps_merge/eps_split)^d
    is restored, making the split/merge density ratio exact.
    """
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    u2 = float(u @ u)
    log_q = -0.5 * u2 * (1.0 / eps_split ** 2 - 1.0 / eps_merge ** 2)
    if correction:
        log_q += u.size * math.log(eps_merge / eps_split)
    with np.errstate(over="ignore"):
        return float(np.exp(log_q))


def _log_q_sm(u: np.ndarray, eps_split: float, eps_merge: float, correction: bool) -> float:
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    u2 = float(u @ u)
    log_q = -0.5 * u2 * (1.0 / eps_split ** 2 - 1.0 / eps_merge ** 2)
    if correction:
        log_q += u.size * math.log(eps_merge / eps_split)
    return log_q


def acceptance_probability(kind: str, u: np.ndarray, lam: float,
                           eps_split: float, eps_merge: float,
                           correction: bool = False,
                           extra_log_ratio: float = 0.0) -> float:
    """Closed-form MH acceptance for a split or merge move.

    split: min(1, e^{-lam} / q_sm(u));  merge: min(1, e^{+lam} q_sm(u)).
    `extra_log_ratio` carries the rendered loss difference when the exact
    posterior ratio is enabled instead of the e^{+-lam} approximation.
    """
    log_q = _log_q_sm(u, eps_split, eps_merge, correction)
    if kind == "split":
        log_a = -lam - log_q + extra_log_ratio
    elif kind == "merge":
        log_a = lam + log_q + extra_log_ratio
    else:
        raise ValueError(f"unknown transition kind {kind!r}")
    return float(np.exp(min(0.0, log_a)))


@dataclass
class SplitProposal:
    which: str
    gaussian: int
    row: int
    u: np.ndarray
    new_value: np.ndarray  # current row value + u


@dataclass
class MergeProposal:
    which: str
    child: int
    parent: int
    u: np.ndarray  # parent value - child value


def propose_split(state: ModelState, which: str, i: int,
                  config: SamplerConfig, rng: np.random.Generator) -> Optional[SplitProposal]:
    """Draw a perturbed private copy of Gaussian i's row; None if ineligible.

    Splitting requires the row to be shared (refcount >= 2): peeling the only
    referrer off its row would change nothing but the codebook size.
    """
    book = state.sh if which == "sh" else state.sr
    idx = state.gaussians.g2sh if which == "sh" else state.gaussians.g2sr
    row = int(idx[i])
    if book.refcount[row] < 2:
        return None
    eps_split, _ = config.eps_for(which)
    u = rng.normal(0.0, eps_split, size=book.dim)
    return SplitProposal(which=which, gaussian=i, row=row, u=u,
                         new_value=book.rows[row].astype(np.float64) + u)


def apply_split(state: ModelState, proposal: SplitProposal) -> int:
    """Allocate the new row (lineage parent = the split row) and remap."""
    book = state.sh if proposal.which == "sh" else state.sr
    idx = state.gaussians.g2sh if proposal.which == "sh" else state.gaussians.g2sr
    new_row = book.alloc(proposal.new_value.astype(np.float32), parent=proposal.row)
    idx[proposal.gaussian] = new_row
    book.decref(proposal.row)
    return new_row


def accept_split(state: ModelState, proposal: SplitProposal, lam: float,
                 config: SamplerConfig, rng: np.random.Generator,
                 extra_log_ratio: float = 0.0) -> bool:
    eps_split, eps_merge = config.eps_for(proposal.which)
    prob = acceptance_probability("split", proposal.u, lam, eps_split, eps_merge,
                                  config.normalization_correction, extra_log_ratio)
    if rng.random() < prob:
        apply_split(state, proposal)
        return True
    return False


def propose_merge(state: ModelState, which: str,
                  config: SamplerConfig, rng: np.random.Generator) -> Optional[MergeProposal]:
    """Pick a split-lineage (child, parent) pair, weighted by row proximity."""
    book = state.sh if which == "sh" else state.sr
    pairs = book.lineage_pairs()
    if len(pairs) == 0:
        return None
    _, eps_merge = config.eps_for(which)
    diffs = book.rows[pairs[:, 1]].astype(np.float64) - book.rows[pairs[:, 0]].astype(np.float64)
    log_w = -0.5 * np.einsum("nd,nd->n", diffs, diffs) / eps_merge ** 2
    w = np.exp(log_w - log_w.max())
    k = int(rng.choice(len(pairs), p=w / w.sum()))
    return MergeProposal(which=which, child=int(pairs[k, 0]),
                         parent=int(pairs[k, 1]), u=diffs[k])


def apply_merge(state: ModelState, proposal: MergeProposal) -> None:
    """Remap every Gaussian on the child row to the parent; frees the child."""
    book = state.sh if proposal.which == "sh" else state.sr
    idx = state.gaussians.g2sh if proposal.which == "sh" else state.gaussians.g2sr
    for i in np.flatnonzero(idx == proposal.child):
        book.incref(proposal.parent)
        idx[i] = proposal.parent
        book.decref(proposal.child)


def accept_merge(state: ModelState, proposal: MergeProposal, lam: float,
                 config: SamplerConfig, rng: np.random.Generator,
                 extra_log_ratio: float = 0.0) -> bool:
    eps_split, eps_merge = config.eps_for(proposal.which)
    prob = acceptance_probability("merge", proposal.u, lam, eps_split, eps_merge,
                                  config.normalization_correction, extra_log_ratio)
    if rng.random() < prob:
        apply_merge(state, proposal)
        return True
    return False


def sgld_update(state: ModelState, grads: GradientSet, config: SamplerConfig,
                rng: np.random.Generator) -> None:
    """Langevin step per group: theta += (eps/2)(-grad L) + mult*sqrt(eps)*eta.

    The codebook penalty is constant in the continuous parameters, so the
    log-posterior gradient is just the negated reconstruction-loss gradient.
    Groups with a zero step size are left untouched.
    """
    if not grads.all_finite():
        raise SamplerError(f"non-finite gradients at iteration {state.iteration}")
    g = state.gaussians

    def step(value64, grad, eps, mult, shape):
        new = value64 - 0.5 * eps * grad
        if mult != 0.0 and eps > 0.0:
            new = new + mult * math.sqrt(eps) * rng.standard_normal(shape)
        return new

    if config.step_pos > 0.0:
        g.positions = step(g.positions.astype(np.float64), grads.positions,
                           config.step_pos, config.noise_pos,
                           g.positions.shape).astype(np.float32)
    if config.step_opacity > 0.0:
        g.opacity_logits = step(g.opacity_logits.astype(np.float64),
                                grads.opacity_logits, config.step_opacity,
                                config.noise_opacity,
                                g.opacity_logits.shape).astype(np.float32)
    if config.step_sh > 0.0:
        live = state.sh.live_indices()
        rows = step(state.sh.rows[live].astype(np.float64), grads.sh_rows[live],
                    config.step_sh, config.noise_sh, (len(live), state.sh.dim))
        state.sh.rows[live] = rows.astype(np.float32)
    if config.step_sr > 0.0:
        live = state.sr.live_indices()
        rows = step(state.sr.rows[live].astype(np.float64), grads.sr_rows[live],
                    config.step_sr, config.noise_sr, (len(live), 7))
        q = rows[:, 3:7]
        rows[:, 3:7] = q / np.linalg.norm(q, axis=1, keepdims=True)
        state.sr.rows[live] = rows.astype(np.float32)


def _candidate_count(fraction: float, population: int) -> int:
    if population <= 0:
        return 0
    return max(1, int(round(fraction * population)))


def _exact_log_ratio(state, views, config, rng, mutate):
    """log p(S')/p(S) from one rendered view, by trial-applying the move."""
    cam, gt = views[int(rng.integers(len(views)))]
    before = recon_loss(rasterize_forward(state, cam).image, gt, config.lambda_ssim)[2]
    import copy
    trial = copy.deepcopy(state)
    mutate(trial)
    after = recon_loss(rasterize_forward(trial, cam).image, gt, config.lambda_ssim)[2]
    return before - after


def train_step(state: ModelState, views: list, config: SamplerConfig,
               rng: np.random.Generator) -> TransitionRecord:
    """One MH transition plus the densification schedule; returns the record."""
    if not views:
        raise ValueError("at least one view is required")
    kind = choose_transition(config, rng)
    sh_before, sr_before = state.sh.live_count, state.sr.live_count
    rec = TransitionRecord(iteration=state.iteration + 1, kind=kind, codebook="-")

    if kind == "update":
        cam, gt = views[int(rng.integers(len(views)))]
        artifacts = rasterize_forward(state, cam)
        l1v, ssimv, recon = recon_loss(artifacts.image, gt, config.lambda_ssim)
        grads = rasterize_backward(state, cam, artifacts,
                                   recon_loss_grad(artifacts.image, gt, config.lambda_ssim))
        sgld_update(state, grads, config, rng)
        rec.attempts, rec.accepts = 1, 1
        rec.accept_probs.append(1.0)
        rec.recon = recon
    elif kind == "split":
        which = "sh" if rng.random() < 0.5 else "sr"
        rec.codebook = which
        idx = state.gaussians.g2sh if which == "sh" else state.gaussians.g2sr
        book = state.sh if which == "sh" else state.sr
        eligible = np.flatnonzero(book.refcount[idx] >= 2)
        n_cand = min(_candidate_count(config.split_fraction, state.num_gaussians),
                     len(eligible))
        if n_cand > 0:
            candidates = rng.choice(eligible, size=n_cand, replace=False)
            lam = config.lambda_for(which)
            for i in candidates:
                proposal = propose_split(state, which, int(i), config, rng)
                if proposal is None:
                    continue
                extra = 0.0
                if config.exact_ratio:
                    extra = _exact_log_ratio(state, views, config, rng,
                                             lambda s: apply_split(s, proposal))
                eps_s, eps_m = config.eps_for(which)
                rec.accept_probs.append(acceptance_probability(
                    "split", proposal.u, lam, eps_s, eps_m,
                    config.normalization_correction, extra))
                rec.attempts += 1
                if accept_split(state, proposal, lam, config, rng, extra):
                    rec.accepts += 1
    else:
        which = "sh" if rng.random() < 0.5 else "sr"
        rec.codebook = which
        book = state.sh if which == "sh" else state.sr
        lam = config.lambda_for(which)
        n_cand = _candidate_count(config.split_fraction, len(book.lineage_pairs()))
        for _ in range(n_cand):
            proposal = propose_merge(state, which, config, rng)
            if proposal is None:
                break
            extra = 0.0
            if config.exact_ratio:
                extra = _exact_log_ratio(state, views, config, rng,
                                         lambda s: apply_merge(s, proposal))
            eps_s, eps_m = config.eps_for(which)
            rec.accept_probs.append(acceptance_probability(
                "merge", proposal.u, lam, eps_s, eps_m,
                config.normalization_correction, extra))
            rec.attempts += 1
            if accept_merge(state, proposal, lam, config, rng, extra):
                rec.accepts += 1

    state.iteration += 1
    if config.densify_every > 0 and state.iteration % config.densify_every == 0:
        densify(state, config.densify_growth, config.gaussian_cap, rng,
                jitter_sigma=config.densify_jitter)

    rec.live_sh = state.sh.live_count
    rec.live_sr = state.sr.live_count
    rec.delta_sh = rec.live_sh - sh_before
    rec.delta_sr = rec.live_sr - sr_before
    if np.isfinite(rec.recon):
        rec.total = total_loss(rec.recon, rec.live_sh, rec.live_sr,
                               config.lambda_sh, config.lambda_sr).total
    return rec


def train(state: ModelState, views: list, config: SamplerConfig, iters: int,
          rng: Optional[np.random.Generator] = None, eval_every: int = 0,
          eval_views: Optional[list] = None, check_invariants: bool = False) -> list:
    """Run the chain for `iters` steps, evaluating PSNR at the given cadence."""
    from .metrics import psnr as psnr_fn
    if rng is None:
        rng = np.random.default_rng(config.seed)
    records = []
    for _ in range(iters):
        rec = train_step(state, views, config, rng)
        if check_invariants:
            validate_state(state)
        if eval_every > 0 and state.iteration % eval_every == 0:
            targets = eval_views if eval_views else views
            vals = [psnr_fn(rasterize_forward(state, cam).image, gt)
                    for cam, gt in targets]
            rec.psnr = float(np.mean(vals))
        records.append(rec)
    return records
