import math

import numpy as np
import pytest

from pblab.corpus import CorpusSpec, Example, generate_corpus
from pblab.model import ModelParams, init_params
from pblab.sampler import plan_counts, preset, sample_paired, split_eval
from pblab.seeds import derive_rng
from pblab.training import (
    TrainConfig,
    compute_weights,
    count_cells,
    evaluate,
    grad_check,
    learning_rate,
    loss,
    mask_entropy_loss,
    prediction_skew_spearman,
    train,
)


@pytest.fixture(scope="module")
def corpus223():
    spec = CorpusSpec(n_languages=2, n_classes=3, n_min=4, n_max=8, p_signal=0.4,
                      p_noise=0.1, seed=21)
    return generate_corpus(spec, 40)


def random_params(vocab, n_classes=3, seed=0, d=8, h=6):
    rng = np.random.default_rng(seed)
    return ModelParams(
        embedding=rng.normal(0, 0.5, (vocab.size + 1, d)),
        hidden_w=rng.normal(0, 0.5, (d, h)),
        hidden_b=rng.normal(0, 0.1, h),
        out_w=rng.normal(0, 0.5, (h, n_classes)),
        out_b=rng.normal(0, 0.1, n_classes),
    )


# ---------------------------------------------------------------- weights

def test_weights_uniform_counts_all_one():
    w = compute_weights(np.full((3, 4), 17))
    assert np.allclose(w.w, 1.0, atol=1e-12)


def test_weights_amazon_fractions():
    # counts in the 1:2:3:4:5 ratio per language
    counts = np.array([[1, 2, 3, 4, 5], [5, 4, 3, 2, 1]]) * 7
    w = compute_weights(counts)
    assert np.allclose(w.w[0], [3.0, 1.5, 1.0, 0.75, 0.6], atol=1e-9)
    assert np.allclose(w.w[1], [0.6, 0.75, 1.0, 1.5, 3.0], atol=1e-9)


def test_weights_xnli_fractions():
    counts = np.array([[30, 20, 10], [10, 20, 30]])
    w = compute_weights(counts)
    assert np.allclose(w.w[0], [2 / 3, 1.0, 2.0], atol=1e-9)


def test_weights_mass_preservation():
    rng = np.random.default_rng(4)
    counts = rng.integers(1, 50, size=(4, 6))
    w = compute_weights(counts)
    per_lang = (counts * w.w).sum(axis=1)
    assert np.allclose(per_lang, counts.sum(axis=1), atol=1e-9)


def test_weights_zero_cell_error():
    with pytest.raises(ValueError, match="language=1, label=0"):
        compute_weights(np.array([[3, 3], [0, 3]]))


# ---------------------------------------------------------------- loss

def test_loss_uniform_model_is_ln_c(corpus223):
    vocab, examples = corpus223
    params = init_params(vocab.size, 3, rng=np.random.default_rng(0))
    assert loss(params, examples[:16]) == pytest.approx(math.log(3), abs=1e-12)


def test_mask_entropy_uniform_and_bounds(corpus223):
    vocab, _ = corpus223
    params = init_params(vocab.size, 3, rng=np.random.default_rng(0))
    assert mask_entropy_loss(params) == pytest.approx(-math.log(3), abs=1e-9)

    peaked = random_params(vocab)
    peaked.out_b = np.array([50.0, 0.0, 0.0], dtype=np.float32)
    lm = mask_entropy_loss(peaked)
    assert -1e-9 <= -lm < 1e-6  # near-one-hot: entropy ~ 0 from below

    for seed in range(20):
        lm = mask_entropy_loss(random_params(vocab, seed=seed))
        assert -math.log(3) - 1e-9 <= lm <= 0.0


def test_loss_includes_lambda_term(corpus223):
    vocab, examples = corpus223
    params = random_params(vocab)
    base = loss(params, examples[:8])
    lam = loss(params, examples[:8], mask_entropy_coeff=0.5, mask_len=3)
    assert lam == pytest.approx(base + 0.5 * mask_entropy_loss(params, 3), abs=1e-12)


def test_loss_nonfinite_params_abort(corpus223):
    vocab, examples = corpus223
    params = random_params(vocab)
    params.out_b = np.array([np.nan, 0, 0], dtype=np.float32)
    with pytest.raises(FloatingPointError):
        loss(params, examples[:4])


def test_weighted_imbalanced_equals_unweighted_balanced_expectation(corpus223):
    """Per-cell mean CE weighted by Eq-style weights == uniform cell average.

    The imbalanced subset has uniform language marginals; with w = n_l/(C n_cl)
    the weighted mean loss collapses to the balanced (uniform over cells)
    average of per-cell mean losses. Checked by exact summation.
    """
    vocab, pool = corpus223
    _, imbal, _ = sample_paired(pool, preset("xnli_skew", 2, 3), 36, seed=9)
    params = random_params(vocab)
    counts = count_cells(imbal, 2, 3)
    weights = compute_weights(counts)
    weighted = loss(params, imbal, weights=weights)

    cell_means = []
    for lang in range(2):
        for c in range(3):
            cell = [e for e in imbal if e.language == lang and e.label == c]
            cell_means.append(loss(params, cell))
    assert weighted == pytest.approx(float(np.mean(cell_means)), abs=1e-9)


# ---------------------------------------------------------------- gradients

def test_grad_check_plain(corpus223):
    vocab, examples = corpus223
    params = random_params(vocab)
    res = grad_check(params, examples[:6], n_samples=120, seed=1)
    assert res.max_rel_error < 1e-4


def test_grad_check_weighted_and_entropy(corpus223):
    vocab, examples = corpus223
    params = random_params(vocab)
    weights = compute_weights(count_cells(examples, 2, 3))
    res = grad_check(params, examples[:6], weights=weights, mask_entropy_coeff=1.0,
                     mask_len=4, n_samples=120, seed=2)
    assert res.max_rel_error < 1e-4


def test_grad_check_at_converged_point(corpus223):
    vocab, _ = corpus223
    spec = CorpusSpec(n_languages=2, n_classes=3, n_min=4, n_max=8, p_signal=1.0,
                      p_noise=0.0, seed=22)
    sep_vocab, sep = generate_corpus(spec, 20)
    params, _ = train(sep, sep[:24], sep_vocab, TrainConfig(epochs=30, lr=0.5, seed=0))
    res = grad_check(params, sep[:8], n_samples=80, seed=3)
    assert res.max_abs_error < 1e-6


def test_learning_rate_schedule_exact():
    total = 40
    for t in range(total):
        assert learning_rate(0.1, t, total) == 0.1 * (1 - t / total)
    assert learning_rate(0.1, 0, total) == 0.1


# ---------------------------------------------------------------- training

def test_train_separable_reaches_perfect_validation():
    spec = CorpusSpec(n_languages=2, n_classes=3, n_min=4, n_max=8, p_signal=1.0,
                      p_noise=0.0, seed=13)
    vocab, pool = generate_corpus(spec, 60)
    val, _ = split_eval(pool, 60, 60, seed=0)
    ids = {e.id for e in val}
    data = [e for e in pool if e.id not in ids]
    params, report = train(data, val, vocab, TrainConfig(epochs=10, seed=0))
    assert report.final["val_accuracy"] == 1.0


def test_train_zero_epochs_returns_init(corpus223):
    vocab, examples = corpus223
    config = TrainConfig(epochs=0, seed=5)
    params, report = train(examples[:60], examples[60:80], vocab, config)
    expected = init_params(vocab.size, 3, config.embed_dim, config.hidden_dim,
                           rng=derive_rng(config.seed, "train", "init"))
    assert params.allclose(expected)
    assert report.epochs == [] and report.selected_epoch is None


def test_train_deterministic_bitwise(corpus223):
    vocab, examples = corpus223
    config = TrainConfig(epochs=3, seed=11)
    p1, r1 = train(examples[:120], examples[120:160], vocab, config)
    p2, r2 = train(examples[:120], examples[120:160], vocab, TrainConfig(epochs=3, seed=11))
    assert p1.allclose(p2)
    assert r1.to_dict() == r2.to_dict()


def test_train_selects_min_val_loss_epoch(corpus223):
    vocab, examples = corpus223
    _, report = train(examples[:120], examples[120:160], vocab, TrainConfig(epochs=5, seed=2))
    vals = [e.val_loss for e in report.epochs]
    assert report.selected_epoch == int(np.argmin(vals))
    assert report.selected_val_loss == min(vals)


def test_train_divergence_reported(corpus223):
    vocab, examples = corpus223
    config = TrainConfig(epochs=1, mask_entropy_coeff=float("inf"), seed=0)
    with pytest.raises(FloatingPointError, match="epoch 0"):
        train(examples[:40], examples[40:60], vocab, config)


def test_train_weighting_changes_model(corpus223):
    vocab, pool = corpus223
    _, imbal, _ = sample_paired(pool, preset("xnli_skew", 2, 3), 120, seed=1)
    p_plain, _ = train(imbal, pool[:30], vocab, TrainConfig(epochs=3, seed=4))
    p_cw, _ = train(imbal, pool[:30], vocab, TrainConfig(epochs=3, seed=4, weighting="per_language"))
    assert not p_plain.allclose(p_cw)


# ---------------------------------------------------------------- evaluation

def perfect_params(vocab):
    """Hand-built classifier: signal embeddings vote for their class."""
    d = h = 3
    emb = np.zeros((vocab.size + 1, d))
    for lang in range(vocab.n_languages):
        for c in range(vocab.n_classes):
            for t in vocab.signal_sets[lang][c]:
                emb[t, c] = 50.0
    return ModelParams(
        embedding=emb, hidden_w=np.eye(d), hidden_b=np.zeros(h),
        out_w=np.eye(h) * 40.0, out_b=np.zeros(3),
    )


def test_evaluate_perfect_classifier():
    spec = CorpusSpec(n_languages=2, n_classes=3, n_min=4, n_max=8, p_signal=1.0,
                      p_noise=0.0, seed=31)
    vocab, examples = generate_corpus(spec, 20)
    metrics = evaluate(perfect_params(vocab), examples, 2, 3)
    assert metrics.overall_accuracy == 1.0
    true_dist = np.full((2, 3), 1 / 3)
    assert np.allclose(metrics.pred_dist, true_dist, atol=1e-12)


def test_evaluate_constant_classifier(corpus223):
    vocab, examples = corpus223
    params = init_params(vocab.size, 3, rng=np.random.default_rng(0))
    params.out_b = np.array([9.0, 0.0, 0.0], dtype=np.float32)
    metrics = evaluate(params, examples, 2, 3)
    assert np.allclose(metrics.pred_dist[:, 0], 1.0)
    assert np.allclose(metrics.pred_dist[:, 1:], 0.0)


def test_prediction_skew_spearman_signs():
    joint = preset("xnli_skew", 2, 3).probs

    class M:
        def __init__(self, dist):
            self.pred_dist = np.asarray(dist)

    follows = M(joint * 2)  # proportional to the joint
    assert prediction_skew_spearman(follows, joint) > 0.99
    anti = M(joint[::-1] * 2)
    assert prediction_skew_spearman(anti, joint) < -0.99
    assert prediction_skew_spearman(M(np.full((2, 3), 1 / 6)), joint) == 0.0
