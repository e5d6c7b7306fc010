"""Training with optional per-language class weights and masked-input entropy loss.

The loss is mean_i w_i * (-log p_i[y_i]) + lambda * l_mask, where w_i is the
per-(language, label) weight n_l / (C * n_{c,l}) (1.0 when weighting is off)
and l_mask = sum_c q_c log q_c is evaluated on an all-mask input. Plain SGD,
learning rate decaying linearly to zero, model selection by validation loss.
All gradient math is hand-rolled and checked against central finite
differences (``grad_check``).
"""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .model import PARAM_FIELDS, ModelParams, forward_examples, init_params, softmax
from .seeds import derive_rng

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class WeightTable:
    """Per-(language, label) loss weights, rows = languages."""

    w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float))

    def to_dict(self) -> dict:
        return {"weights": self.w.tolist()}


def count_cells(examples, n_languages: int, n_classes: int) -> np.ndarray:
    counts = np.zeros((n_languages, n_classes), dtype=int)
    for ex in examples:
        counts[ex.language, ex.label] += 1
    return counts


def compute_weights(counts) -> WeightTable:
    """w[l, c] = n_l / (C * n[l, c]).

    For every language, sum_c n[l,c] * w[l,c] = n_l, so weighting preserves
    each language's total loss mass. A uniform table gives all weights 1.
    Zero cells are an error: the weight is undefined there and a silently
    clipped value would hide a data problem.
    """
    counts = np.asarray(counts, dtype=float)
    if counts.ndim != 2:
        raise ValueError("counts must be a 2-d table")
    if (counts < 1).any():
        bad = np.argwhere(counts < 1)[0]
        raise ValueError(f"cell (language={bad[0]}, label={bad[1]}) has no examples; weight undefined")
    n_l = counts.sum(axis=1, keepdims=True)
    C = counts.shape[1]
    return WeightTable(w=n_l / (C * counts))


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.1                      # decays linearly to 0 over all steps
    weighting: str = "none"              # "none" or "per_language"
    mask_entropy_coeff: float = 0.0
    seed: int = 0
    val_every: int = 1                   # validate every k epochs
    embed_dim: int = 32
    hidden_dim: int = 32
    max_len: int = 32                    # upper bound for the sampled all-mask length

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.mask_entropy_coeff < 0:
            raise ValueError("mask_entropy_coeff must be >= 0")
        if self.weighting not in ("none", "per_language"):
            raise ValueError(f"unknown weighting mode {self.weighting!r}")
        if self.val_every < 1:
            raise ValueError("val_every must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float | None


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)   # EpochStats per epoch
    selected_epoch: int | None = None
    selected_val_loss: float | None = None
    final: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "epochs": [
                {"epoch": e.epoch, "train_loss": e.train_loss, "val_loss": e.val_loss}
                for e in self.epochs
            ],
            "selected_epoch": self.selected_epoch,
            "selected_val_loss": self.selected_val_loss,
            "final": self.final,
        }


class _Batch:
    """Flat token layout for vectorized forward/backward over a list of examples."""

    def __init__(self, examples):
        if not examples:
            raise ValueError("empty batch")
        self.n = len(examples)
        self.lengths = np.array([len(ex.tokens) for ex in examples], dtype=np.int64)
        self.flat_tokens = np.concatenate([np.asarray(ex.tokens, dtype=np.int64) for ex in examples])
        self.owner = np.repeat(np.arange(self.n), self.lengths)
        self.starts = np.concatenate([[0], np.cumsum(self.lengths)])
        self.labels = np.array([ex.label for ex in examples], dtype=np.int64)
        self.langs = np.array([ex.language for ex in examples], dtype=np.int64)

    def subset(self, idx) -> "_Batch":
        sub = _Batch.__new__(_Batch)
        idx = np.asarray(idx)
        sub.n = len(idx)
        sub.lengths = self.lengths[idx]
        flat_idx = np.concatenate([np.arange(self.starts[i], self.starts[i + 1]) for i in idx])
        sub.flat_tokens = self.flat_tokens[flat_idx]
        sub.owner = np.repeat(np.arange(sub.n), sub.lengths)
        sub.starts = np.concatenate([[0], np.cumsum(sub.lengths)])
        sub.labels = self.labels[idx]
        sub.langs = self.langs[idx]
        return sub


def _as_float64(params: ModelParams) -> dict:
    return {name: getattr(params, name).astype(np.float64) for name in PARAM_FIELDS}


def _example_weights(batch: _Batch, weights: WeightTable | None) -> np.ndarray:
    if weights is None:
        return np.ones(batch.n)
    return weights.w[batch.langs, batch.labels]


def _loss_and_grad(arrs: dict, batch: _Batch, w_ex: np.ndarray, lam: float, mask_len: int,
                   want_grad: bool):
    """Weighted CE + lambda * masked-input entropy, and its exact gradient.

    ``arrs`` are float64 parameter arrays; probabilities are clamped to
    PROB_CLAMP inside logs and the gradient honors the clamp.
    """
    emb, w_h, b_h, w_o, b_o = (arrs[n] for n in PARAM_FIELDS)
    B = batch.n

    sums = np.zeros((B, emb.shape[1]))
    np.add.at(sums, batch.owner, emb[batch.flat_tokens])
    x = sums / batch.lengths[:, None]
    hid = np.tanh(x @ w_h + b_h)
    probs = softmax(hid @ w_o + b_o)
    p_true = probs[np.arange(B), batch.labels]
    ce = float(np.mean(w_ex * -np.log(np.maximum(p_true, PROB_CLAMP))))

    value = ce
    if lam != 0.0:
        if mask_len < 1:
            raise ValueError("mask_len must be >= 1")
        x_m = emb[-1]  # mean of mask_len identical mask rows
        hid_m = np.tanh(x_m @ w_h + b_h)
        q = softmax(hid_m @ w_o + b_o)
        l_mask = float(np.sum(q * np.log(np.maximum(q, PROB_CLAMP))))
        value += lam * l_mask

    if not want_grad or not math.isfinite(value):
        return value, None

    grads = {n: np.zeros_like(arrs[n]) for n in PARAM_FIELDS}
    # CE branch: examples whose clamped p_true hit the floor have zero gradient.
    active = p_true > PROB_CLAMP
    dz = probs * (w_ex * active)[:, None] / B
    dz[np.arange(B), batch.labels] -= w_ex * active / B
    grads["out_w"] += hid.T @ dz
    grads["out_b"] += dz.sum(axis=0)
    dhid = dz @ w_o.T
    da = dhid * (1.0 - hid**2)
    grads["hidden_w"] += x.T @ da
    grads["hidden_b"] += da.sum(axis=0)
    dx = da @ w_h.T
    np.add.at(grads["embedding"], batch.flat_tokens, dx[batch.owner] / batch.lengths[batch.owner, None])

    if lam != 0.0:
        g = np.log(np.maximum(q, PROB_CLAMP)) + (q > PROB_CLAMP)
        dz_m = lam * q * (g - np.dot(g, q))
        grads["out_w"] += np.outer(hid_m, dz_m)
        grads["out_b"] += dz_m
        da_m = (dz_m @ w_o.T) * (1.0 - hid_m**2)
        grads["hidden_w"] += np.outer(x_m, da_m)
        grads["hidden_b"] += da_m
        grads["embedding"][-1] += w_h @ da_m

    return value, grads


def loss(params: ModelParams, batch_examples, weights: WeightTable | None = None,
         mask_entropy_coeff: float = 0.0, mask_len: int = 1) -> float:
    """Scalar training loss on a batch of examples."""
    batch = _Batch(batch_examples)
    value, _ = _loss_and_grad(
        _as_float64(params), batch, _example_weights(batch, weights),
        mask_entropy_coeff, mask_len, want_grad=False,
    )
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value!r} on batch of {batch.n}")
    return value


def mask_entropy_loss(params: ModelParams, mask_len: int = 1) -> float:
    """l_mask = sum_c q_c log q_c on an all-mask input; always in [-ln C, 0]."""
    arrs = _as_float64(params)
    x_m = arrs["embedding"][-1]
    hid_m = np.tanh(x_m @ arrs["hidden_w"] + arrs["hidden_b"])
    q = softmax(hid_m @ arrs["out_w"] + arrs["out_b"])
    if mask_len < 1:
        raise ValueError("mask_len must be >= 1")
    return float(np.sum(q * np.log(np.maximum(q, PROB_CLAMP))))


def learning_rate(lr0: float, step: int, total_steps: int) -> float:
    """lr at global step t of T: lr0 * (1 - t/T)."""
    return lr0 * (1.0 - step / total_steps)


def train(data, val, vocab, config: TrainConfig):
    """SGD over shuffled mini-batches; returns (params, report).

    The returned parameters are the snapshot from the epoch with the lowest
    validation loss (earliest epoch on ties). Deterministic given
    ``config.seed``. Divergence (non-finite loss) raises with epoch/step.
    """
    config.validate()
    if not data or not val:
        raise ValueError("train and validation sets must be non-empty")

    weights = None
    if config.weighting == "per_language":
        weights = compute_weights(count_cells(data, vocab.n_languages, vocab.n_classes))

    params = init_params(
        vocab.size, vocab.n_classes, config.embed_dim, config.hidden_dim,
        rng=derive_rng(config.seed, "train", "init"),
    )
    report = TrainReport()
    if config.epochs == 0:
        return params, report

    full = _Batch(data)
    w_full = _example_weights(full, weights)
    val_batch = _Batch(val)
    w_val = np.ones(val_batch.n)

    rng_shuffle = derive_rng(config.seed, "train", "shuffle")
    rng_masklen = derive_rng(config.seed, "train", "masklen")

    n = len(data)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    arrs = _as_float64(params)

    best_val = math.inf
    best_params = None
    step = 0
    for epoch in range(config.epochs):
        order = rng_shuffle.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = full.subset(idx)
            mask_len = int(rng_masklen.integers(1, config.max_len + 1))
            value, grads = _loss_and_grad(
                arrs, batch, w_full[idx], config.mask_entropy_coeff, mask_len, want_grad=True
            )
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss at epoch {epoch} step {step}")
            lr = learning_rate(config.lr, step, total_steps)
            for name in PARAM_FIELDS:
                # Parameters live on the float32 grid (checkpoint dtype).
                updated = (arrs[name] - lr * grads[name]).astype(np.float32)
                setattr(params, name, updated)
                arrs[name] = updated.astype(np.float64)
            epoch_losses.append(value)
            step += 1

        val_loss = None
        if (epoch + 1) % config.val_every == 0 or epoch == config.epochs - 1:
            val_value, _ = _loss_and_grad(arrs, val_batch, w_val, 0.0, 1, want_grad=False)
            val_loss = float(val_value)
            if val_loss < best_val:
                best_val = val_loss
                best_params = params.copy()
                report.selected_epoch = epoch
                report.selected_val_loss = val_loss
        report.epochs.append(EpochStats(epoch=epoch, train_loss=float(np.mean(epoch_losses)), val_loss=val_loss))

    selected = best_params if best_params is not None else params
    metrics = evaluate(selected, val, n_languages=vocab.n_languages, n_classes=vocab.n_classes)
    report.final = {"val_accuracy": metrics.overall_accuracy}
    return selected, report


@dataclass
class EvalMetrics:
    overall_accuracy: float
    per_language_accuracy: list
    pred_dist: np.ndarray            # (L, C) fractions of predictions per language
    n_per_language: list

    def to_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "per_language_accuracy": self.per_language_accuracy,
            "pred_dist": self.pred_dist.tolist(),
            "n_per_language": self.n_per_language,
        }


def evaluate(params: ModelParams, test, n_languages: int | None = None,
             n_classes: int | None = None) -> EvalMetrics:
    """Accuracy overall and per language, plus the per-language predicted-label distribution."""
    if not test:
        raise ValueError("empty test set")
    if n_languages is None:
        n_languages = max(ex.language for ex in test) + 1
    if n_classes is None:
        n_classes = params.n_classes
    batch = _Batch(test)
    probs, _ = forward_examples(params, test)
    preds = probs.argmax(axis=1)

    correct = preds == batch.labels
    per_lang_acc = []
    n_per_lang = []
    dist = np.zeros((n_languages, n_classes))
    for lang in range(n_languages):
        sel = batch.langs == lang
        n_lang = int(sel.sum())
        n_per_lang.append(n_lang)
        per_lang_acc.append(float(correct[sel].mean()) if n_lang else float("nan"))
        for c in range(n_classes):
            dist[lang, c] = float((preds[sel] == c).sum()) / n_lang if n_lang else float("nan")
    return EvalMetrics(
        overall_accuracy=float(correct.mean()),
        per_language_accuracy=per_lang_acc,
        pred_dist=dist,
        n_per_language=n_per_lang,
    )


def prediction_skew_spearman(metrics: EvalMetrics, joint_probs) -> float:
    """Spearman rank correlation between predicted-label frequencies and training joint cells.

    Both L x C tables are flattened; a constant input yields 0.0 by
    convention (no rank order to speak of).
    """
    a = np.asarray(metrics.pred_dist, dtype=float).ravel()
    b = np.asarray(joint_probs, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError("table shapes differ")
    if np.allclose(a, a[0]) or np.allclose(b, b[0]):
        return 0.0
    rho = stats.spearmanr(a, b).statistic
    return float(rho) if math.isfinite(rho) else 0.0


def write_metrics_json(metrics: EvalMetrics, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(metrics.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def write_pred_dist_csv(metrics: EvalMetrics, path, lang_names=None, label_names=None) -> None:
    """Predicted-label distribution, rows = languages, columns = labels, in percent."""
    L, C = metrics.pred_dist.shape
    lang_names = lang_names or [f"L{i}" for i in range(L)]
    label_names = label_names or [str(c) for c in range(C)]
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["language"] + list(label_names))
        for lang in range(L):
            writer.writerow([lang_names[lang]] + [repr(float(100.0 * metrics.pred_dist[lang, c])) for c in range(C)])


@dataclass
class GradCheckResult:
    max_rel_error: float
    max_abs_error: float
    n_checked: int


def grad_check(params: ModelParams, batch_examples, weights: WeightTable | None = None,
               mask_entropy_coeff: float = 0.0, mask_len: int = 1, n_samples: int = 150,
               step: float = 1e-4, seed: int = 0) -> GradCheckResult:
    """Compare the analytic gradient to central finite differences.

    Checks a seeded sample of parameter coordinates spread over all arrays.
    Relative error uses max(|analytic|, |fd|, 1e-6) in the denominator so a
    converged (near-zero-gradient) point is judged on absolute error.
    """
    batch = _Batch(batch_examples)
    w_ex = _example_weights(batch, weights)
    arrs = _as_float64(params)
    _, grads = _loss_and_grad(arrs, batch, w_ex, mask_entropy_coeff, mask_len, want_grad=True)

    sizes = {name: arrs[name].size for name in PARAM_FIELDS}
    total = sum(sizes.values())
    rng = derive_rng(seed, "grad_check")
    flat_indices = rng.choice(total, size=min(n_samples, total), replace=False)

    def locate(flat: int):
        for name in PARAM_FIELDS:
            if flat < sizes[name]:
                return name, flat
            flat -= sizes[name]
        raise AssertionError

    max_rel = 0.0
    max_abs = 0.0
    for flat in sorted(int(i) for i in flat_indices):
        name, offset = locate(flat)
        ref = arrs[name].ravel()
        orig = ref[offset]
        ref[offset] = orig + step
        up, _ = _loss_and_grad(arrs, batch, w_ex, mask_entropy_coeff, mask_len, want_grad=False)
        ref[offset] = orig - step
        down, _ = _loss_and_grad(arrs, batch, w_ex, mask_entropy_coeff, mask_len, want_grad=False)
        ref[offset] = orig
        fd = (up - down) / (2.0 * step)
        an = grads[name].ravel()[offset]
        abs_err = abs(fd - an)
        max_abs = max(max_abs, abs_err)
        max_rel = max(max_rel, abs_err / max(abs(fd), abs(an), 1e-6))
    return GradCheckResult(max_rel_error=max_rel, max_abs_error=max_abs, n_checked=len(flat_indices))
