"""Hypothesis-assessment-iteration loop for equation discovery.

A Proposer suggests candidate term libraries (optionally with a sparsity
weight); each candidate is fit and scored, the result lands in an
experience pool whose most recent ``m`` records condition the next
proposal, and repeated proposals trigger early stopping. The seeded
MutationProposer is the deterministic stand-in for both a live advisor
and a hyperparameter-search baseline.
"""

import json
import warnings
from dataclasses import dataclass

import numpy as np

from . import latent as latent_mod
from . import termlib
from .errors import (
    DiscoveryFailedError,
    EvalError,
    InvalidArgumentError,
    ParseError,
    SingularDesignError,
)
from .llm_client import extract_one, render_prompt
from .sindy import (
    DEFAULT_ETA,
    DEFAULT_GAMMA,
    DEFAULT_THRESHOLD,
    CoefficientMatrix,
    Equation,
    _column_scales,
    estimate_derivatives,
    fit_coefficients,
    fitness,
    r_squared,
)


@dataclass
class ExperienceRecord:
    """One assessed hypothesis: library, coefficients, and scores."""

    iteration: int
    library: termlib.TermLibrary
    signature: str
    coeffs: CoefficientMatrix
    r2: float
    length: int
    fitness: float
    eta: float
    gamma: float

    def __post_init__(self):
        expected = self.r2 - self.gamma * self.length
        if abs(self.fitness - expected) > 1e-9:
            raise InvalidArgumentError(
                f"fitness {self.fitness} inconsistent with r2/length "
                f"(expected {expected})")


@dataclass
class DiscoveryConfig:
    max_iters: int = 15
    m: int = 5  # receptive field: records shown to the proposer
    r_stop: int = 3  # identical-signature repetitions that stop the loop
    eta: float = DEFAULT_ETA
    gamma: float = DEFAULT_GAMMA
    threshold: float = DEFAULT_THRESHOLD
    adaptive_eta: bool = False
    k_max: int = termlib.DEFAULT_K_MAX
    seed: int = 0
    derivative_method: str = "central"


@dataclass
class LatentProblem:
    """Inputs for latent-mode assessment (joint autoencoder training).

    ``dt`` is the frame interval; the assessment scores the equation
    against finite-difference derivatives of the latent trajectory, which
    is where observation noise actually lands.
    """

    frames: object  # (n, D) rows or FrameSequence
    frame_derivs: object
    d: int
    dt: float = 1.0
    init_ae: object = None
    hyper: object = None
    hidden: tuple = latent_mod.DEFAULT_HIDDEN
    threshold_every: int = 100


# ---------------------------------------------------------------------------
# proposers
# ---------------------------------------------------------------------------

def term_universe(dim, funcs=("sin", "cos", "exp", "tanh")):
    """The grammar subset the mutation search draws from."""
    texts = ["1"]
    texts += [f"z{i}" for i in range(1, dim + 1)]
    texts += [f"z{i}^2" for i in range(1, dim + 1)]
    texts += [f"z{i}*z{j}" for i in range(1, dim + 1)
              for j in range(i + 1, dim + 1)]
    texts += [f"z{i}^3" for i in range(1, dim + 1)]
    texts += [f"z{i}^2*z{j}" for i in range(1, dim + 1)
              for j in range(1, dim + 1) if i != j]
    texts += [f"z{i}^4" for i in range(1, dim + 1)]
    texts += [f"{f}(z{i})" for f in funcs for i in range(1, dim + 1)]
    canonical = []
    seen = set()
    for text in texts:
        term = termlib.parse_term(text, dim)
        if term.text() not in seen:
            seen.add(term.text())
            canonical.append(term.text())
    return canonical


def initial_library(dim, kind="poly2"):
    if kind == "poly2":
        texts = ["1"] + [f"z{i}" for i in range(1, dim + 1)]
        texts += [f"z{i}^2" for i in range(1, dim + 1)]
        texts += [f"z{i}*z{j}" for i in range(1, dim + 1)
                  for j in range(i + 1, dim + 1)]
    elif kind == "linear":
        texts = [f"z{i}" for i in range(1, dim + 1)]
    else:
        raise InvalidArgumentError(f"unknown initial library kind {kind!r}")
    return termlib.make_library(texts, dim)


class Proposer:
    """Interface: propose(recent_records, dim, caps) -> (library, eta|None).

    Returning None ends the run (used by replay when the recording is
    exhausted).
    """

    def propose(self, recent, dim, caps):
        raise NotImplementedError


class MutationProposer(Proposer):
    """Seeded epsilon-greedy mutation search over the term universe.

    First call proposes the initial library; afterwards, with probability
    0.3 a random grammar term is added to the best recent library, with
    probability 0.3 its lowest-coefficient term is dropped, and otherwise
    the two best recent libraries are recombined. With ``adaptive_eta``
    the proposal also perturbs the best record's sparsity weight.
    """

    def __init__(self, dim, seed=0, initial="poly2", adaptive_eta=False):
        self.dim = dim
        self.initial = initial
        self.adaptive_eta = adaptive_eta
        self._rng = np.random.default_rng(seed)
        self._universe = term_universe(dim)

    def _term_strength(self, record):
        w = np.abs(record.coeffs.values
                   * record.coeffs.feature_scales[:, None]).max(axis=1)
        return dict(zip(record.library.texts(), w))

    def _add(self, texts, k_max):
        pool = [t for t in self._universe if t not in texts]
        if not pool or len(texts) >= k_max:
            return self._drop_weakest(texts, strength=None)
        return texts + [pool[self._rng.integers(len(pool))]]

    def _drop_weakest(self, texts, strength):
        if len(texts) <= 1:
            return texts
        if strength is None:
            return [t for i, t in enumerate(texts)
                    if i != self._rng.integers(len(texts))]
        weakest = min(texts, key=lambda t: (strength.get(t, 0.0), t))
        return [t for t in texts if t != weakest]

    def _recombine(self, a, b, k_max):
        union = sorted(set(a.library.texts()) | set(b.library.texts()))
        keep = [t for t in union if self._rng.random() < 0.7]
        if not keep:
            keep = [union[self._rng.integers(len(union))]]
        while len(keep) > k_max:
            keep.pop(self._rng.integers(len(keep)))
        return keep

    def propose(self, recent, dim, caps):
        k_max = caps.get("k_max", termlib.DEFAULT_K_MAX)
        eta = None
        if not recent:
            return initial_library(dim, self.initial), eta
        ranked = sorted(recent, key=lambda r: (-r.fitness, r.length,
                                               r.iteration))
        best = ranked[0]
        if self.adaptive_eta:
            factor = self._rng.choice([0.5, 1.0, 2.0])
            eta = float(np.clip(best.eta * factor, 1e-4, 1.0))
        roll = self._rng.random()
        texts = best.library.texts()
        if roll < 0.3:
            texts = self._add(texts, k_max)
        elif roll < 0.6:
            texts = self._drop_weakest(texts, self._term_strength(best))
        else:
            second = next((r for r in ranked[1:]
                           if r.signature != best.signature), None)
            if second is None:
                texts = self._add(texts, k_max)
            else:
                texts = self._recombine(best, second, k_max)
        return termlib.make_library(texts, dim, k_max=k_max), eta


class ReplayProposer(Proposer):
    """Replays proposals from a recorded discovery transcript."""

    def __init__(self, entries):
        self._entries = list(entries)
        self._cursor = 0

    @classmethod
    def from_transcript(cls, path):
        entries = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    entries.append(json.loads(line))
        return cls([e for e in entries if "proposed_terms" in e
                    and e.get("skipped") is not True])

    def propose(self, recent, dim, caps):
        if self._cursor >= len(self._entries):
            return None
        entry = self._entries[self._cursor]
        self._cursor += 1
        lib = termlib.make_library(entry["proposed_terms"], dim,
                                   k_max=caps.get("k_max",
                                                  termlib.DEFAULT_K_MAX))
        return lib, entry.get("eta")


class AdvisorProposer(Proposer):
    """Asks a chat advisor for the next library via the proposal template."""

    def __init__(self, client, adaptive_eta=False):
        self.client = client
        self.adaptive_eta = adaptive_eta

    def propose(self, recent, dim, caps):
        k_max = caps.get("k_max", termlib.DEFAULT_K_MAX)
        eta_instruction = (
            " and <eta>value</eta> for the sparsity weight."
            if self.adaptive_eta else ".")
        messages = render_prompt("library_proposal", {
            "dim": dim, "k_max": k_max,
            "experience": format_experience_prompt(recent, len(recent) or 1),
            "eta_instruction": eta_instruction})
        reply = self.client.chat(messages)
        text = extract_one(reply, "library")
        if text is None:
            raise ParseError("reply carries no <library> block")
        library = termlib.parse_library(text, dim, k_max=k_max)
        eta = None
        if self.adaptive_eta:
            eta_text = extract_one(reply, "eta")
            if eta_text is not None:
                eta = float(eta_text)
        return library, eta


# ---------------------------------------------------------------------------
# loop primitives
# ---------------------------------------------------------------------------

def should_stop(pool, candidate_signature, r_stop):
    """True iff the signature already appears r_stop times in the pool."""
    if r_stop < 1:
        raise InvalidArgumentError("r_stop must be >= 1")
    count = sum(1 for rec in pool if rec.signature == candidate_signature)
    return count >= r_stop


def select_best(pool, selector=None):
    """Best pool record: argmax fitness, ties to shorter equations, then
    earlier iterations. A selector may override but must pick a member."""
    if not pool:
        raise DiscoveryFailedError("experience pool is empty")
    default = min(pool, key=lambda r: (-r.fitness, r.length, r.iteration))
    if selector is None:
        return default
    try:
        iteration = selector.select(pool)
    except (ParseError, InvalidArgumentError) as exc:
        warnings.warn(f"selector failed ({exc}); using default selection")
        return default
    chosen = next((r for r in pool if r.iteration == iteration), None)
    if chosen is None:
        warnings.warn(f"selector picked iteration {iteration} which is not "
                      f"in the pool; using default selection")
        return default
    return chosen


class AdvisorSelector:
    """Final selection delegated to a chat advisor."""

    def __init__(self, client):
        self.client = client

    def select(self, pool):
        messages = render_prompt("final_selection", {
            "experience": format_experience_prompt(pool, len(pool))})
        reply = self.client.chat(messages)
        decision = extract_one(reply, "decision")
        if decision is None or not decision.strip().startswith("iteration"):
            raise ParseError(f"unusable selection reply: {reply[:80]!r}")
        return int(decision.strip().split()[-1])


def format_experience_prompt(pool, m):
    """Deterministic text table of the last m experience records."""
    if m < 1:
        raise InvalidArgumentError("m must be >= 1")
    recent = list(pool)[-m:]
    if not recent:
        return "(no prior experience)"
    lines = []
    for rec in recent:
        coeffs = rec.coeffs.values
        terms = ", ".join(
            f"{text}: ({', '.join(f'{coeffs[i, j]:.4g}' for j in range(coeffs.shape[1]))})"
            for i, text in enumerate(rec.library.texts()))
        lines.append(
            f"iteration {rec.iteration} | eta {rec.eta:.4g} | "
            f"r2 {rec.r2:.4g} | length {rec.length} | "
            f"fitness {rec.fitness:.4g} | terms: {terms}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# assessment backends
# ---------------------------------------------------------------------------

def _assess_pixel(traj, derivs, library, eta, config):
    design = termlib.evaluate_library(library, traj.states)
    coeffs = fit_coefficients(design, derivs, eta=eta,
                              threshold=config.threshold,
                              term_names=library.texts())
    coeffs.library_ref = termlib.library_signature(library)
    r2 = r_squared(design @ coeffs.values, derivs)
    return coeffs, r2


def _assess_latent(problem, library, eta, config):
    ae, coeffs, _ = latent_mod.train_ae_sindy(
        problem.frames, problem.frame_derivs, problem.d, library, eta=eta,
        hyper=problem.hyper, hidden=problem.hidden, init=problem.init_ae,
        threshold_every=problem.threshold_every)
    x = latent_mod.flatten_frames(problem.frames)
    z = ae.encode(x)
    theta = termlib.evaluate_library(library, z)
    coeffs.feature_scales = _column_scales(theta)
    zdot_fd = np.gradient(z, problem.dt, axis=0, edge_order=2)
    r2 = r_squared(theta @ coeffs.values, zdot_fd)
    return coeffs, r2, ae


def run_discovery(data, mode, proposer, config=None, selector=None):
    """Run the full hypothesis-assessment-iteration loop.

    ``data`` is a smoothed Trajectory in pixel mode or a LatentProblem in
    latent mode. Returns (best Equation, experience pool, transcript);
    in latent mode the equation gains an ``autoencoder`` attribute with
    the jointly trained model of the selected record.
    """
    config = config or DiscoveryConfig()
    if mode == "pixel":
        dim = data.dim
        derivs = estimate_derivatives(data, config.derivative_method).values
    elif mode == "latent":
        dim = data.d
    else:
        raise InvalidArgumentError(f"unknown discovery mode {mode!r}")

    caps = {"k_max": config.k_max, "max_power": termlib.MAX_POWER}
    pool = []
    transcript = []
    models = {}

    for t in range(1, config.max_iters + 1):
        proposal, failure = None, None
        for attempt in range(2):
            try:
                proposal = proposer.propose(pool[-config.m:], dim, caps)
                break
            except (ParseError, InvalidArgumentError) as exc:
                failure = exc
        if proposal is None and failure is not None:
            transcript.append({"t": t, "skipped": True,
                               "reason": str(failure)})
            continue
        if proposal is None:
            break  # replay exhausted
        library, eta_prop = proposal
        eta = eta_prop if (config.adaptive_eta and eta_prop is not None) \
            else config.eta
        signature = termlib.library_signature(library)
        if should_stop(pool, signature, config.r_stop):
            transcript.append({"t": t, "proposed_terms": library.texts(),
                               "eta": eta, "stop_decision": "repetition"})
            break

        try:
            if mode == "pixel":
                coeffs, r2 = _assess_pixel(data, derivs, library, eta, config)
            else:
                coeffs, r2, ae = _assess_latent(data, library, eta, config)
                models[t] = ae
        except (EvalError, SingularDesignError) as exc:
            transcript.append({"t": t, "proposed_terms": library.texts(),
                               "eta": eta, "skipped": True,
                               "reason": str(exc)})
            continue

        length = coeffs.n_active()
        record = ExperienceRecord(
            iteration=t, library=library, signature=signature, coeffs=coeffs,
            r2=r2, length=length, fitness=fitness(r2, length, config.gamma),
            eta=eta, gamma=config.gamma)
        pool.append(record)
        transcript.append({"t": t, "proposed_terms": library.texts(),
                           "eta": eta, "coeffs": coeffs.values.tolist(),
                           "r2": r2, "length": length,
                           "fitness": record.fitness,
                           "stop_decision": "continue"})

    if not pool:
        raise DiscoveryFailedError("no iteration produced an assessable "
                                   "library")
    best = select_best(pool, selector=selector)
    equation = Equation(library=best.library, coeffs=best.coeffs,
                        eta=best.eta,
                        metrics={"r2": best.r2, "length": best.length,
                                 "fitness": best.fitness,
                                 "iteration": best.iteration})
    if mode == "latent" and best.iteration in models:
        equation.autoencoder = models[best.iteration]
    return equation, pool, transcript


def write_discovery_transcript(path, transcript):
    with open(path, "w") as fh:
        for entry in transcript:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
