"""Gradient verification: per-op finite-difference checks plus a whole-model
composite.  Ops are looked up on the autodiff module at call time, so a
broken (or deliberately corrupted) op is caught when the suite runs.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .episodes import Episode
from .model import ArrayStore, init_model
from .training import episode_losses

OP_TOLERANCE = 1e-5
MODEL_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def _r(rng, *shape):
    return rng.standard_normal(shape)


def _case_add(rng):
    c = Tensor(_r(rng, 3, 4))
    return lambda x: ad.tensor_sum(ad.mul(ad.add(x, c), ad.add(x, c))), Tensor(_r(rng, 3, 4))


def _case_sub(rng):
    c = Tensor(_r(rng, 5))
    return lambda x: ad.tensor_sum(ad.exp(ad.sub(x, c))), Tensor(0.3 * _r(rng, 5))


def _case_mul(rng):
    c = Tensor(_r(rng, 4, 2))
    return lambda x: ad.tensor_sum(ad.mul(x, ad.mul(x, c))), Tensor(_r(rng, 4, 2))


def _case_neg_scale(rng):
    return lambda x: ad.tensor_sum(ad.scale(ad.neg(x), 1.7)), Tensor(_r(rng, 6))


def _case_matmul(rng):
    a = Tensor(_r(rng, 3, 4))
    v = Tensor(_r(rng, 3))
    def f(x):
        prod = ad.matmul(a, x)      # 2d x 2d
        vec = ad.matmul(v, prod)    # 1d x 2d
        return ad.matmul(vec, vec)  # 1d x 1d
    return f, Tensor(_r(rng, 4, 2))


def _case_sum_mean(rng):
    return (lambda x: ad.add(ad.tensor_sum(ad.mean(x, axis=1)),
                             ad.mean(ad.tensor_sum(x, axis=0))),
            Tensor(_r(rng, 3, 5)))


def _case_reshape_transpose(rng):
    c = Tensor(_r(rng, 4, 3))
    return (lambda x: ad.tensor_sum(ad.mul(ad.transpose(ad.reshape(x, (3, 4))), c)),
            Tensor(_r(rng, 12)))


def _case_concat_split(rng):
    c = Tensor(_r(rng, 2, 3))
    def f(x):
        top, bottom = ad.split(x, 2, axis=0)
        joined = ad.concat([ad.mul(top, c), bottom], axis=0)
        return ad.tensor_sum(ad.mul(joined, joined))
    return f, Tensor(_r(rng, 4, 3))


def _case_gather_rows(rng):
    idx = np.array([0, 2, 2, 1])
    def f(x):
        g = ad.gather_rows(x, idx)
        return ad.tensor_sum(ad.mul(g, g))
    return f, Tensor(_r(rng, 3, 4))


def _case_softmax(rng):
    c = Tensor(_r(rng, 6))
    return lambda x: ad.tensor_sum(ad.mul(ad.softmax(x), c)), Tensor(_r(rng, 6))


def _case_sigmoid(rng):
    return lambda x: ad.tensor_sum(ad.sigmoid(x)), Tensor(2.0 * _r(rng, 7))


def _case_log(rng):
    return lambda x: ad.tensor_sum(ad.log(x)), Tensor(0.5 + np.abs(_r(rng, 5)))


def _case_exp(rng):
    return lambda x: ad.tensor_sum(ad.exp(x)), Tensor(0.5 * _r(rng, 5))


def _case_relu(rng):
    # keep points away from the kink
    x0 = _r(rng, 8)
    x0[np.abs(x0) < 0.05] = 0.3
    return lambda x: ad.tensor_sum(ad.relu(x)), Tensor(x0)


def _case_gelu(rng):
    return lambda x: ad.tensor_sum(ad.gelu(x)), Tensor(_r(rng, 8))


def _case_layer_norm(rng):
    gain = Tensor(1.0 + 0.1 * _r(rng, 6))
    bias = Tensor(0.1 * _r(rng, 6))
    return lambda x: ad.tensor_sum(ad.layer_norm(x, gain, bias)), Tensor(_r(rng, 3, 6))


def _case_cosine(rng):
    c = Tensor(_r(rng, 9))
    return lambda x: ad.cosine(x, c), Tensor(_r(rng, 9))


def _case_bce(rng):
    y = (rng.uniform(size=10) > 0.5).astype(np.float64)
    return lambda x: ad.tensor_sum(ad.bce_with_logits(x, y)), Tensor(_r(rng, 10))


def _case_conv2d(rng):
    kernel = Tensor(_r(rng, 3, 2, 2, 2))
    bias = Tensor(_r(rng, 3))
    def f(x):
        out = ad.conv2d(x, kernel, bias, stride=2, padding=1)
        return ad.tensor_sum(ad.mul(out, out))
    return f, Tensor(_r(rng, 2, 5, 5))


def _case_dropout(rng):
    def f(x):
        # fixed generator per call keeps the mask identical across calls
        out = ad.dropout(x, 0.4, rng=np.random.default_rng(11), training=True)
        return ad.tensor_sum(ad.mul(out, out))
    return f, Tensor(_r(rng, 4, 4))


def _case_pooled_score(rng):
    # weighted pooling into a scaled cosine score, the LCM inner loop shape
    fmap_const = Tensor(_r(rng, 3, 2, 2))
    target_vec = Tensor(_r(rng, 3))
    def f(weights):
        pooled = ad.scale(ad.matmul(ad.reshape(fmap_const, (3, 4)),
                                    ad.reshape(weights, (4,))), 1.0 / 4.0)
        return ad.scale(ad.cosine(pooled, target_vec), 10.0)
    return f, Tensor(np.abs(_r(rng, 2, 2)) + 0.5)


OP_CASES = [
    ("add", _case_add),
    ("sub", _case_sub),
    ("mul", _case_mul),
    ("neg-scale", _case_neg_scale),
    ("matmul", _case_matmul),
    ("sum-mean", _case_sum_mean),
    ("reshape-transpose", _case_reshape_transpose),
    ("concat-split", _case_concat_split),
    ("gather-rows", _case_gather_rows),
    ("softmax", _case_softmax),
    ("sigmoid", _case_sigmoid),
    ("log", _case_log),
    ("exp", _case_exp),
    ("relu", _case_relu),
    ("gelu", _case_gelu),
    ("layer-norm", _case_layer_norm),
    ("cosine", _case_cosine),
    ("bce-with-logits", _case_bce),
    ("conv2d", _case_conv2d),
    ("dropout", _case_dropout),
    ("pooled-score", _case_pooled_score),
]


def _tiny_episode(seed=5):
    """A fixed two-label episode with in-memory features, small enough for
    exhaustive finite differences over every model parameter."""
    rng = np.random.default_rng(seed)
    channels, embed_dim = 4, 6
    labels = ("alpha", "beta")
    support_ids = ("s0", "s1")
    query_ids = ("q0", "q1", "q2", "q3")
    arrays = {}
    for image_id in support_ids + query_ids:
        arrays[image_id] = rng.standard_normal((channels, 2, 2))
    support_targets = np.array([[1.0, 0.0], [0.0, 1.0]])
    query_targets = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 1.0]])
    episode = Episode(labels=labels, k_shot=1, support_ids=support_ids,
                      support_targets=support_targets, query_ids=query_ids,
                      query_targets=query_targets, query_per_label=2)
    embeddings = {label: rng.standard_normal(embed_dim) for label in labels}
    model = init_model(channels=channels, embed_dim=embed_dim, joint_dim=8, heads=2,
                       dynconv_inner=3, dynconv_top=2, scale=10.0, dropout=0.0,
                       rng=rng)
    return model, episode, ArrayStore(arrays), embeddings


def full_model_max_error(eps=1e-6, seed=5) -> float:
    """Finite-difference the episode loss against every model parameter."""
    model, episode, store, embeddings = _tiny_episode(seed)
    params = model.named_parameters()

    def loss_tensor():
        cm, q = episode_losses(model, episode, store, embeddings, training=False)
        return ad.add(cm, q)

    model.zero_grad()
    loss_tensor().backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        it = np.nditer(p.data, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            original = p.data[idx]
            p.data[idx] = original + eps
            f_plus = loss_tensor().item()
            p.data[idx] = original - eps
            f_minus = loss_tensor().item()
            p.data[idx] = original
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[name][idx])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
            it.iternext()
    return worst


def run_suite(eps=1e-6, op_tolerance=OP_TOLERANCE, model_tolerance=MODEL_TOLERANCE,
              include_model=True, seed=123) -> list[CheckResult]:
    """Run every per-op check and (optionally) the whole-model composite."""
    results = []
    for i, (name, builder) in enumerate(OP_CASES):
        f, x0 = builder(np.random.default_rng([seed, i]))
        error = ad.grad_check(f, x0, eps=eps)
        results.append(CheckResult(name=name, max_error=error, tolerance=op_tolerance))
    if include_model:
        results.append(CheckResult(name="full-model", max_error=full_model_max_error(eps=eps),
                                   tolerance=model_tolerance))
    return results
