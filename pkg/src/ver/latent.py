"""Intrinsic-coordinate discovery with fully connected autoencoders.

Reconstruction training at candidate bottleneck widths, variance-explained
diagnostics, an advisor-guided dimension search, and joint training of the
autoencoder with a sparse latent dynamics model. Everything is plain
numpy with hand-derived gradients (including the forward-over-reverse pass
needed for the encoder Jacobian-vector product), so training is
deterministic under a seed.
"""

import json
import re
import struct
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import zoom as _ndzoom

from . import termlib
from .dynamics import FrameSequence
from .errors import (
    DivergedTrainingError,
    InvalidArgumentError,
    TrainingStalledWarning,
)
from .sindy import CoefficientMatrix


@dataclass(frozen=True)
class TrainHyper:
    """Gradient-descent settings shared by both training entry points."""

    epochs: int = 500
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0


DEFAULT_HIDDEN = (128, 64)


def _glorot(rng, fan_out, fan_in):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


class Autoencoder:
    """Mirrored fully connected encoder/decoder with a tanh body.

    Hidden layers use tanh (smooth everywhere, so the Jacobian-vector
    product is well defined); the bottleneck and output layers are linear.
    ``activation="linear"`` turns the whole network linear, which makes
    the reconstruction optimum coincide with principal components.
    """

    def __init__(self, input_dim, bottleneck, hidden=DEFAULT_HIDDEN, seed=0,
                 activation="tanh"):
        if activation not in ("tanh", "linear"):
            raise InvalidArgumentError(f"unknown activation {activation!r}")
        self.activation = activation
        self.input_dim = int(input_dim)
        self.bottleneck = int(bottleneck)
        self.hidden = tuple(int(h) for h in hidden)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        enc_sizes = [self.input_dim, *self.hidden, self.bottleneck]
        dec_sizes = [self.bottleneck, *reversed(self.hidden), self.input_dim]
        self.enc_w = [_glorot(rng, o, i) for i, o in zip(enc_sizes, enc_sizes[1:])]
        self.enc_b = [np.zeros(o) for o in enc_sizes[1:]]
        self.dec_w = [_glorot(rng, o, i) for i, o in zip(dec_sizes, dec_sizes[1:])]
        self.dec_b = [np.zeros(o) for o in dec_sizes[1:]]

    # -- parameter plumbing -------------------------------------------------

    def parameters(self):
        params = {}
        for i, (w, b) in enumerate(zip(self.enc_w, self.enc_b)):
            params[f"enc_w{i}"] = w
            params[f"enc_b{i}"] = b
        for i, (w, b) in enumerate(zip(self.dec_w, self.dec_b)):
            params[f"dec_w{i}"] = w
            params[f"dec_b{i}"] = b
        return params

    def set_parameters(self, params):
        for i in range(len(self.enc_w)):
            self.enc_w[i] = params[f"enc_w{i}"]
            self.enc_b[i] = params[f"enc_b{i}"]
        for i in range(len(self.dec_w)):
            self.dec_w[i] = params[f"dec_w{i}"]
            self.dec_b[i] = params[f"dec_b{i}"]

    def copy(self):
        clone = Autoencoder(self.input_dim, self.bottleneck, self.hidden,
                            self.seed, activation=self.activation)
        clone.set_parameters({k: v.copy() for k, v in self.parameters().items()})
        return clone

    # -- activation helpers (expressed in terms of the stored output a) ----

    def _act(self, s):
        return np.tanh(s) if self.activation == "tanh" else s

    def _act_prime(self, a):
        return 1.0 - a * a if self.activation == "tanh" else np.ones_like(a)

    def _act_second(self, a):
        if self.activation == "tanh":
            return -2.0 * a * (1.0 - a * a)
        return np.zeros_like(a)

    # -- forward passes -----------------------------------------------------

    def _forward(self, ws, bs, x):
        acts = [x]
        last = len(ws) - 1
        for l, (w, b) in enumerate(zip(ws, bs)):
            s = acts[-1] @ w.T + b
            acts.append(self._act(s) if l < last else s)
        return acts

    def encode(self, x):
        return self._forward(self.enc_w, self.enc_b, np.atleast_2d(x))[-1]

    def decode(self, z):
        return self._forward(self.dec_w, self.dec_b, np.atleast_2d(z))[-1]

    def reconstruct(self, x):
        return self.decode(self.encode(x))

    def encode_jvp(self, x, v):
        """Latents plus the Jacobian-vector product J_phi(x) v."""
        x, v = np.atleast_2d(x), np.atleast_2d(v)
        acts, tangents = [x], [v]
        last = len(self.enc_w) - 1
        for l, (w, b) in enumerate(zip(self.enc_w, self.enc_b)):
            s = acts[-1] @ w.T + b
            ds = tangents[-1] @ w.T
            if l < last:
                a = self._act(s)
                acts.append(a)
                tangents.append(self._act_prime(a) * ds)
            else:
                acts.append(s)
                tangents.append(ds)
        return acts[-1], tangents[-1]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        for key, g in grads.items():
            self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * g * g
            mhat = self.m[key] / (1 - self.beta1 ** self.t)
            vhat = self.v[key] / (1 - self.beta2 ** self.t)
            params[key] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# frame helpers
# ---------------------------------------------------------------------------

def flatten_frames(frames_or_seq):
    """(n, c, h, w) frames -> (n, c*h*w) float rows."""
    frames = frames_or_seq.frames if isinstance(frames_or_seq, FrameSequence) \
        else np.asarray(frames_or_seq)
    if frames.ndim == 4:
        return frames.reshape(frames.shape[0], -1).astype(float)
    return np.asarray(frames, dtype=float)


def downscale_frames(fseq, target):
    """Bilinear downscale of every frame to (target_h, target_w)."""
    n, c, h, w = fseq.frames.shape
    th, tw = target
    out = _ndzoom(fseq.frames, (1, 1, th / h, tw / w), order=1)
    meta = dict(fseq.meta)
    meta["resolution"] = (th, tw)
    meta["downscaled_from"] = (h, w)
    return FrameSequence(times=fseq.times.copy(), frames=out, meta=meta)


# ---------------------------------------------------------------------------
# reconstruction training
# ---------------------------------------------------------------------------

def _recon_loss_and_grads(ae, x):
    """Per-pixel mean squared reconstruction error and its gradients."""
    enc_acts = ae._forward(ae.enc_w, ae.enc_b, x)
    dec_acts = ae._forward(ae.dec_w, ae.dec_b, enc_acts[-1])
    xhat = dec_acts[-1]
    diff = xhat - x
    loss = float(np.mean(diff * diff))
    grads = {}
    g = 2.0 * diff / diff.size
    g = _mlp_backward(ae, ae.dec_w, dec_acts, g, grads, "dec")
    _mlp_backward(ae, ae.enc_w, enc_acts, g, grads, "enc")
    return loss, grads


def _mlp_backward(ae, ws, acts, g_out, grads, prefix):
    """Standard reverse pass; returns the gradient wrt the input."""
    g = g_out
    last = len(ws) - 1
    for l in range(last, -1, -1):
        g_s = g if l == last else g * ae._act_prime(acts[l + 1])
        grads[f"{prefix}_w{l}"] = g_s.T @ acts[l]
        grads[f"{prefix}_b{l}"] = g_s.sum(axis=0)
        g = g_s @ ws[l]
    return g


def train_autoencoder(frames, d, hyper=None, hidden=DEFAULT_HIDDEN,
                      init=None, activation="tanh", return_history=False):
    """Self-supervised reconstruction training at bottleneck width ``d``.

    Frames are flattened to rows; the last 10% are held out and their
    per-pixel mean squared reconstruction error is returned alongside the
    trained model. Deterministic under ``hyper.seed``.
    """
    hyper = hyper or TrainHyper()
    x = flatten_frames(frames)
    n = len(x)
    n_holdout = max(1, n // 10)
    x_train, x_val = x[:-n_holdout], x[-n_holdout:]
    ae = init.copy() if init is not None else Autoencoder(
        x.shape[1], d, hidden=hidden, seed=hyper.seed, activation=activation)
    params = ae.parameters()
    opt = Adam(params, lr=hyper.lr)
    rng = np.random.default_rng(hyper.seed + 1)

    epoch_losses = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(x_train))
        total, count = 0.0, 0
        for start in range(0, len(x_train), hyper.batch_size):
            batch = x_train[order[start:start + hyper.batch_size]]
            loss, grads = _recon_loss_and_grads(ae, batch)
            opt.step(params, grads)
            ae.set_parameters(params)
            total += loss * len(batch)
            count += len(batch)
        epoch_losses.append(total / count)
        if epoch == 49 and epoch_losses[-1] >= epoch_losses[0]:
            warnings.warn("reconstruction loss not decreasing over the first "
                          "50 epochs", TrainingStalledWarning)

    recon_error = float(np.mean((ae.reconstruct(x_val) - x_val) ** 2))
    if return_history:
        return ae, recon_error, epoch_losses
    return ae, recon_error


# ---------------------------------------------------------------------------
# variance diagnostics
# ---------------------------------------------------------------------------

def variance_explained(latents):
    """Eigenvalue shares of the latent covariance, sorted descending."""
    latents = np.atleast_2d(np.asarray(latents, dtype=float))
    n, d = latents.shape
    if n <= d:
        raise InvalidArgumentError("need more samples than dimensions")
    cov = np.cov(latents, rowvar=False).reshape(d, d)
    eigvals = np.clip(np.linalg.eigvalsh(cov)[::-1], 0.0, None)
    total = eigvals.sum()
    if total <= 0:
        return np.zeros(d)
    return eigvals / total


# ---------------------------------------------------------------------------
# dimension search
# ---------------------------------------------------------------------------

@dataclass
class DimensionTrialRecord:
    d: int
    recon_error: float
    normalized_error: float
    ratios: np.ndarray
    autoencoder: Autoencoder
    sample_pair: tuple = None  # (original frame row, reconstruction)


class ElbowDimensionAdvisor:
    """Deterministic dimension picker.

    Stops at the smallest d whose reconstruction error is within 10% of
    the error at d+1 (or already below ``converged`` as a fraction of the
    pixel variance, which guards the comparison when both errors sit at
    the training floor) and whose smallest variance ratio is at least
    ``min_ratio``. Otherwise requests the next dimension, ascending.
    """

    def __init__(self, rel_tol=0.10, min_ratio=0.02, converged=0.02):
        self.rel_tol = rel_tol
        self.min_ratio = min_ratio
        self.converged = converged

    def _qualifies(self, rec, by_d):
        nxt = by_d.get(rec.d + 1)
        if rec.ratios.min() < self.min_ratio:
            return False
        if rec.normalized_error <= self.converged:
            return True
        return nxt is not None and \
            rec.normalized_error <= (1.0 + self.rel_tol) * nxt.normalized_error

    def decide(self, trials, d_range, remaining):
        by_d = {t.d: t for t in trials}
        for d in sorted(by_d):
            if self._qualifies(by_d[d], by_d):
                return ("stop", d)
        if remaining > 0:
            for d in range(d_range[0], d_range[1] + 1):
                if d not in by_d:
                    return ("try", d)
        return ("stop", self.choose(trials))

    def choose(self, trials):
        ok = [t for t in trials if t.ratios.min() >= self.min_ratio]
        pool = ok or list(trials)
        best = min(pool, key=lambda t: t.normalized_error)
        floor = (1.0 + self.rel_tol) * best.normalized_error
        candidates = [t for t in pool if t.normalized_error <= floor]
        return min(candidates, key=lambda t: t.d).d


def _pair_image(sample_pair):
    """Stack an original row and its reconstruction into a 2-D image."""
    orig, recon = sample_pair
    size = orig.size
    side = int(np.sqrt(size))
    if side * side == size:
        return np.vstack([orig.reshape(side, side),
                          recon.reshape(side, side)])
    return np.vstack([orig[None, :], recon[None, :]])


class LlmDimensionAdvisor:
    """Delegates the try/stop decision to a chat advisor."""

    def __init__(self, client):
        self.client = client

    @staticmethod
    def _trials_text(trials):
        return "\n".join(
            f"d={t.d} | error {t.normalized_error:.4g} (fraction of pixel "
            f"variance) | ratios "
            + ", ".join(f"{r:.3f}" for r in t.ratios)
            for t in trials) or "(no trials yet)"

    def decide(self, trials, d_range, remaining):
        from .llm_client import extract_one, render_prompt
        if not trials:
            return ("try", d_range[0])
        image = _pair_image(trials[-1].sample_pair)
        reply = self.client.chat(render_prompt("dimension_advice", {
            "reconstruction": image, "trials": self._trials_text(trials),
            "d_min": d_range[0], "d_max": d_range[1], "budget": remaining}))
        decision = extract_one(reply, "decision")
        m = re.fullmatch(r"(try|stop)\s+d\s*=\s*(\d+)",
                         (decision or "").strip().lower())
        if m is None or remaining <= 0:
            return ("stop", self.choose(trials))
        return (m.group(1), int(m.group(2)))

    def choose(self, trials):
        return min(trials, key=lambda t: (t.normalized_error, t.d)).d


class ScriptedDimensionAdvisor:
    """Replays a fixed decision sequence for tests."""

    def __init__(self, decisions):
        self._decisions = list(decisions)

    def decide(self, trials, d_range, remaining):
        return self._decisions.pop(0)

    def choose(self, trials):
        return min(trials, key=lambda t: t.normalized_error).d


def dimension_search(frames, advisor=None, d_range=(1, 6), max_trials=6,
                     hyper=None, hidden=DEFAULT_HIDDEN):
    """Advisor-guided search for the intrinsic dimension.

    Each trial trains an autoencoder at the requested bottleneck and logs
    (reconstruction error, variance ratios); the advisor sees the full
    trial log and decides to continue or stop. Returns the chosen d, its
    trained autoencoder, and the trial log.
    """
    advisor = advisor or ElbowDimensionAdvisor()
    hyper = hyper or TrainHyper()
    x = flatten_frames(frames)
    pixel_var = max(float(x.var()), 1e-300)
    trials = []

    while True:
        action, d = advisor.decide(trials, d_range, max_trials - len(trials))
        if action == "stop":
            break
        if not (d_range[0] <= d <= d_range[1]):
            clamped = min(max(d, d_range[0]), d_range[1])
            warnings.warn(f"advisor picked d={d} outside {d_range}; "
                          f"clamped to {clamped}")
            d = clamped
        if any(t.d == d for t in trials):
            break  # advisor is looping; fall back to its final choice
        trial_hyper = TrainHyper(epochs=hyper.epochs,
                                 batch_size=hyper.batch_size,
                                 lr=hyper.lr, seed=hyper.seed + 101 * d)
        ae, err = train_autoencoder(x, d, hyper=trial_hyper, hidden=hidden)
        ratios = variance_explained(ae.encode(x))
        trials.append(DimensionTrialRecord(
            d=d, recon_error=err, normalized_error=err / pixel_var,
            ratios=ratios, autoencoder=ae,
            sample_pair=(x[0], ae.reconstruct(x[:1])[0])))
        if len(trials) >= max_trials:
            break

    if not trials:
        raise InvalidArgumentError("dimension search ended with no trials")
    action, chosen = advisor.decide(trials, d_range, 0)
    if action != "stop":
        chosen = advisor.choose(trials)
    by_d = {t.d: t for t in trials}
    if chosen not in by_d:
        warnings.warn(f"advisor chose untried d={chosen}; falling back to "
                      f"best trial")
        chosen = advisor.choose(trials)
    return chosen, by_d[chosen].autoencoder, trials


# ---------------------------------------------------------------------------
# joint autoencoder + sparse dynamics training
# ---------------------------------------------------------------------------

def ae_sindy_loss_and_grads(ae, xi, x, v, library, eta,
                            parts=("recon", "sindy", "l1"), xi_mask=None):
    """Joint loss and analytic gradients for a batch.

    recon: (1/B) sum_i ||x_i - psi(phi(x_i))||^2
    sindy: (1/B) sum_i ||J_phi(x_i) v_i - Theta(z_i) Xi||^2
    l1:    eta * sum |Xi|

    The sindy term differentiates through the encoder twice (the JVP and
    its reverse pass), which needs tanh's second derivative.
    """
    x, v = np.atleast_2d(x), np.atleast_2d(v)
    batch = len(x)
    grads = {key: np.zeros_like(val) for key, val in ae.parameters().items()}
    g_xi = np.zeros_like(xi)

    # encoder forward with tangents; pre-activation tangents are kept for
    # the second-derivative term in the reverse pass
    enc_acts, enc_tans, pre_tans = [x], [v], []
    last_e = len(ae.enc_w) - 1
    for l, (w, b) in enumerate(zip(ae.enc_w, ae.enc_b)):
        s = enc_acts[-1] @ w.T + b
        ds = enc_tans[-1] @ w.T
        pre_tans.append(ds)
        if l < last_e:
            a = ae._act(s)
            enc_acts.append(a)
            enc_tans.append(ae._act_prime(a) * ds)
        else:
            enc_acts.append(s)
            enc_tans.append(ds)
    z, zdot = enc_acts[-1], enc_tans[-1]

    loss = {"recon": 0.0, "sindy": 0.0, "l1": 0.0}
    g_z = np.zeros_like(z)
    g_zdot = np.zeros_like(zdot)

    if "recon" in parts:
        dec_acts = ae._forward(ae.dec_w, ae.dec_b, z)
        diff = dec_acts[-1] - x
        loss["recon"] = float(np.sum(diff * diff)) / batch
        g_z += _mlp_backward(ae, ae.dec_w, dec_acts, 2.0 * diff / batch,
                             grads, "dec")

    if "sindy" in parts:
        theta = termlib.evaluate_library(library, z)
        dtheta = termlib.evaluate_library_grad(library, z)
        resid = zdot - theta @ xi
        loss["sindy"] = float(np.sum(resid * resid)) / batch
        g_zdot += 2.0 * resid / batch
        g_theta = -(2.0 / batch) * resid @ xi.T
        g_z += np.einsum("bk,bkd->bd", g_theta, dtheta)
        g_xi += -(2.0 / batch) * theta.T @ resid

    if "l1" in parts:
        loss["l1"] = eta * float(np.sum(np.abs(xi)))
        g_xi += eta * np.sign(xi)

    # reverse pass through the encoder and its tangent computation; the
    # second derivative of the activation enters via the tangent path
    g_a, g_da = g_z, g_zdot
    for l in range(last_e, -1, -1):
        if l == last_e:
            g_s, g_ds = g_a, g_da
        else:
            a = enc_acts[l + 1]
            sp = ae._act_prime(a)
            g_s = sp * g_a + ae._act_second(a) * pre_tans[l] * g_da
            g_ds = sp * g_da
        grads[f"enc_w{l}"] += g_s.T @ enc_acts[l] + g_ds.T @ enc_tans[l]
        grads[f"enc_b{l}"] += g_s.sum(axis=0)
        g_a = g_s @ ae.enc_w[l]
        g_da = g_ds @ ae.enc_w[l]

    if xi_mask is not None:
        g_xi = np.where(xi_mask, g_xi, 0.0)
    total = sum(loss.values())
    return total, loss, grads, g_xi


def train_ae_sindy(frames, frame_derivs, d, library, eta=0.01, hyper=None,
                   hidden=DEFAULT_HIDDEN, init=None, threshold=0.05,
                   threshold_every=100, warm_start_xi=True):
    """Jointly train encoder, decoder, and coefficient matrix.

    Latent derivatives come from the encoder Jacobian-vector product
    against the observed frame derivatives. Every ``threshold_every``
    epochs, coefficients below ``threshold`` are zeroed and frozen. On a
    NaN loss, training aborts with the last stable epoch's parameters
    attached to the error.

    With ``warm_start_xi`` (and a pretrained ``init`` model) the
    coefficients start from a ridge least-squares fit on the initial
    latents instead of zero, which saves most of the slow early drift.
    """
    hyper = hyper or TrainHyper()
    x = flatten_frames(frames)
    v = flatten_frames(frame_derivs)
    if x.shape != v.shape:
        raise InvalidArgumentError("frames and derivatives must align")
    if library.dim != d:
        raise InvalidArgumentError(f"library dim {library.dim} != d {d}")

    ae = init.copy() if init is not None else Autoencoder(
        x.shape[1], d, hidden=hidden, seed=hyper.seed)
    params = ae.parameters()
    xi = np.zeros((library.k, d))
    if warm_start_xi and init is not None:
        from .sindy import fit_coefficients
        z0, zdot0 = ae.encode_jvp(x, v)
        theta0 = termlib.evaluate_library(library, z0)
        xi = fit_coefficients(theta0, zdot0, eta=eta, threshold=0.0).values
    xi_mask = np.ones_like(xi, dtype=bool)
    opt = Adam({**params, "xi": xi}, lr=hyper.lr)
    rng = np.random.default_rng(hyper.seed + 2)

    losses = []
    stable = ({k: p.copy() for k, p in params.items()}, xi.copy())
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(x))
        sums = np.zeros(3)
        count = 0
        for start in range(0, len(x), hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            total, part, grads, g_xi = ae_sindy_loss_and_grads(
                ae, xi, x[idx], v[idx], library, eta, xi_mask=xi_mask)
            grads["xi"] = g_xi
            merged = {**params, "xi": xi}
            opt.step(merged, grads)
            xi = merged["xi"]
            xi[~xi_mask] = 0.0
            ae.set_parameters(params)
            sums += np.array([part["recon"], part["sindy"], part["l1"]]) \
                * len(idx)
            count += len(idx)
        epoch_loss = {"recon": sums[0] / count, "sindy": sums[1] / count,
                      "l1": sums[2] / count}
        epoch_loss["total"] = sum(epoch_loss.values())
        losses.append(epoch_loss)
        if not np.isfinite(epoch_loss["total"]):
            raise DivergedTrainingError(
                f"non-finite loss at epoch {epoch}", checkpoint=stable)
        stable = ({k: p.copy() for k, p in params.items()}, xi.copy())
        if threshold_every and (epoch + 1) % threshold_every == 0:
            xi_mask &= np.abs(xi) >= threshold
            xi[~xi_mask] = 0.0

    coeffs = CoefficientMatrix(
        values=xi, library_ref=termlib.library_signature(library))
    return ae, coeffs, losses


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, ae):
    """JSON header (architecture, bottleneck, seed) + f32 parameter blob."""
    header = {"input_dim": ae.input_dim, "bottleneck": ae.bottleneck,
              "hidden": list(ae.hidden), "seed": ae.seed,
              "activation": ae.activation}
    params = ae.parameters()
    order = sorted(params)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for key in order:
            blob = np.ascontiguousarray(params[key], dtype="<f4").tobytes()
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        ae = Autoencoder(header["input_dim"], header["bottleneck"],
                         hidden=tuple(header["hidden"]), seed=header["seed"],
                         activation=header.get("activation", "tanh"))
        params = ae.parameters()
        for key in sorted(params):
            (nbytes,) = struct.unpack("<I", fh.read(4))
            flat = np.frombuffer(fh.read(nbytes), dtype="<f4")
            params[key] = flat.reshape(params[key].shape).astype(float)
        ae.set_parameters(params)
    return ae
