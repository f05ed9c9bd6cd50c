"""Normalization, per-lead decoder training, and full-record inference.

Inputs are z-scored lead-wise per segment; the conditioning embedding is
z-scored per dimension with statistics frozen on the training embedding
store. Targets train in their own z-scored space using training-fold
per-lead statistics, which also drive denormalization at inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dataset import TARGET_LEADS, segment_record_nonoverlap
from .errors import DataError
from .nn import LeadDecoder, save_checkpoint
from .optim import AdamW
from .tensor import Tensor

EPS = 1e-8
DEGENERATE_STD = 1e-6


def normalize_x(x):
    """Lead-wise z-score over time; returns (x_hat, mu, sigma).

    Rows with population std below 1e-6 are zeroed (flat leads carry no
    information; eps alone would just amplify noise).
    """
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    sigma = x.std(axis=-1, keepdims=True)
    x_hat = (x - mu) / (sigma + EPS)
    degenerate = (sigma < DEGENERATE_STD).reshape(-1)
    x_hat[degenerate] = 0.0
    return x_hat.astype(np.float32), mu.reshape(-1), sigma.reshape(-1)


def normalize_h(h, mu, sigma):
    """Z-score an embedding (or batch of embeddings) per dimension."""
    h = np.asarray(h, dtype=np.float64)
    return ((h - mu) / (sigma + EPS)).astype(np.float32)


def embedding_stats(h_matrix):
    """Per-dimension mean/std over the TRAINING embedding store."""
    h = np.asarray(h_matrix, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] == 0:
        raise DataError("embedding stats need a non-empty [N, D] matrix")
    return h.mean(axis=0), h.std(axis=0)


def target_lead_stats(segments):
    """Per-target-lead mean/std over training-fold segments (mV)."""
    if not segments:
        raise DataError("target stats need at least one segment")
    ys = np.stack([s.y for s in segments]).astype(np.float64)  # [N, 5, T]
    mu = ys.mean(axis=(0, 2))
    sigma = ys.std(axis=(0, 2))
    return mu, sigma


def denormalize_y(y_hat, mu, sigma):
    return np.asarray(y_hat, dtype=np.float64) * (sigma + EPS) + mu


def recon_loss(y_hat, y):
    """MSE + MAE (equal weighting) over a batch of windows."""
    diff = T.add(y_hat, T.mul(y, -1.0))
    return T.add(T.mean(T.mul(diff, diff)), T.mean(T.absolute(diff)))


def decode(x_hat, h_hat, model):
    """Single-segment forward pass: [3, T] + [128] -> [T] (normalized)."""
    xb = Tensor(np.asarray(x_hat, dtype=np.float32)[None])
    hb = Tensor(np.asarray(h_hat, dtype=np.float32)[None])
    return model(xb, hb).data[0]


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    conditioned: bool = True   # False trains the clean-only (C) ablation


@dataclass
class TrainResult:
    model: LeadDecoder
    best_epoch: int
    best_val_loss: float
    history: list = field(default_factory=list)   # (train_loss, val_loss) per epoch


def _prep_arrays(segments, embeddings, lead_idx, h_mu, h_sigma, y_mu, y_sigma,
                 conditioned):
    xs = np.stack([normalize_x(s.x)[0] for s in segments])
    ys = np.stack([s.y[lead_idx] for s in segments]).astype(np.float64)
    ys = ((ys - y_mu[lead_idx]) / (y_sigma[lead_idx] + EPS)).astype(np.float32)
    if conditioned:
        hs = normalize_h(embeddings, h_mu, h_sigma)
    else:
        hs = np.zeros((len(segments), embeddings.shape[1]), dtype=np.float32)
    return xs, hs, ys


def train_decoder(lead, train_segments, val_segments, train_embeddings,
                  val_embeddings, config=None, log=None):
    """Train one per-lead decoder with early stopping on validation loss.

    Returns the parameters from the best validation epoch. The clean-only
    ablation (config.conditioned=False) zeroes the conditioning channel
    but is otherwise trained identically.
    """
    config = config or TrainConfig()
    if not train_segments:
        raise DataError("zero training segments")
    if not val_segments:
        raise DataError("zero validation segments")
    if lead not in TARGET_LEADS:
        raise DataError(f"unknown target lead {lead}")
    lead_idx = TARGET_LEADS.index(lead)
    h_mu, h_sigma = embedding_stats(train_embeddings)
    y_mu, y_sigma = target_lead_stats(train_segments)
    xs, hs, ys = _prep_arrays(train_segments, train_embeddings, lead_idx,
                              h_mu, h_sigma, y_mu, y_sigma, config.conditioned)
    vxs, vhs, vys = _prep_arrays(val_segments, val_embeddings, lead_idx,
                                 h_mu, h_sigma, y_mu, y_sigma, config.conditioned)

    rng = np.random.default_rng(config.seed)
    model = LeadDecoder(lead=lead, seed=config.seed)
    opt = AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)

    def val_loss():
        total, n = 0.0, 0
        for lo in range(0, len(vxs), 256):
            xb = Tensor(vxs[lo:lo + 256])
            hb = Tensor(vhs[lo:lo + 256])
            yb = Tensor(vys[lo:lo + 256])
            loss = recon_loss(model(xb, hb), yb)
            total += loss.item() * len(vxs[lo:lo + 256])
            n += len(vxs[lo:lo + 256])
        return total / n

    from .nn import get_parameter_vector, set_parameter_vector
    best = (0, np.inf, get_parameter_vector(model))
    history = []
    order = np.arange(len(xs))
    for epoch in range(1, config.max_epochs + 1):
        rng.shuffle(order)
        losses = []
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            xb, hb, yb = Tensor(xs[idx]), Tensor(hs[idx]), Tensor(ys[idx])
            loss = recon_loss(model(xb, hb), yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        vl = val_loss()
        history.append((float(np.mean(losses)), vl))
        if log is not None:
            log(f"{lead} epoch {epoch} train={history[-1][0]:.5f} val={vl:.5f}")
        if vl < best[1]:
            best = (epoch, vl, get_parameter_vector(model))
        elif epoch - best[0] >= config.patience:
            break
    set_parameter_vector(model, best[2])
    return TrainResult(model=model, best_epoch=best[0], best_val_loss=float(best[1]),
                       history=history)


@dataclass
class NormStats:
    """Frozen training-fold statistics needed at inference."""

    h_mu: np.ndarray
    h_sigma: np.ndarray
    y_mu: np.ndarray       # per target lead, mV
    y_sigma: np.ndarray

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in
                ("h_mu", "h_sigma", "y_mu", "y_sigma")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(d[k]) for k in
                      ("h_mu", "h_sigma", "y_mu", "y_sigma")})


def reconstruct_segments(segments, encoder, decoders, stats, conditioned=True,
                         batch_size=256):
    """Decode a list of segments; returns [N, 5, T] in mV."""
    out = np.zeros((len(segments), len(TARGET_LEADS), segments[0].x.shape[1]))
    for lo in range(0, len(segments), batch_size):
        chunk = segments[lo:lo + batch_size]
        xs = np.stack([normalize_x(s.x)[0] for s in chunk])
        raw = np.stack([s.x for s in chunk]).astype(np.float32)
        h = encoder(Tensor(raw)).data
        if conditioned:
            hh = normalize_h(h, stats.h_mu, stats.h_sigma)
        else:
            hh = np.zeros_like(h)
        xb, hb = Tensor(xs), Tensor(hh)
        for li, lead in enumerate(TARGET_LEADS):
            y_hat = decoders[lead](xb, hb).data
            out[lo:lo + len(chunk), li] = denormalize_y(
                y_hat, stats.y_mu[li], stats.y_sigma[li])
    return out


def reconstruct_record(rec, encoder, decoders, stats, conditioned=True):
    """Reassemble non-overlapping windows into a full [5, n_samples] signal.

    The right-aligned final window's overlap region is averaged with the
    preceding window.
    """
    segments = segment_record_nonoverlap(rec)
    if not segments:
        raise DataError(f"record {rec.record_id} shorter than one window")
    t = segments[0].x.shape[1]
    preds = reconstruct_segments(segments, encoder, decoders, stats,
                                 conditioned=conditioned)
    out = np.zeros((len(TARGET_LEADS), rec.n_samples))
    weight = np.zeros(rec.n_samples)
    for seg, pred in zip(segments, preds):
        out[:, seg.start:seg.start + t] += pred
        weight[seg.start:seg.start + t] += 1.0
    return out / weight[None, :]


def save_decoders(out_dir, results, stats):
    for lead, res in results.items():
        save_checkpoint(f"{out_dir}/decoder_{lead}.ckpt", res.model,
                        extra={"best_epoch": res.best_epoch,
                               "best_val_loss": res.best_val_loss,
                               "history": res.history,
                               "norm_stats": stats.to_dict()})
