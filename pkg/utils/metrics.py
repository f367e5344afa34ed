"""
GAN evaluation
--------------

1. `SurrogateScorer` - a small frozen classifier trained on the labeled
   dataset; its class probabilities stand in for Inception-v3 logits and its
   penultimate layer for the pool features.
2. Inception score, PSD matrix square root and Frechet distance.
3. Reward adapters (IS, or reciprocal FID) and Spearman rank correlation.
"""

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
import structlog
import torch
from scipy.stats import rankdata

from utils.errors import (
    CalibrationError,
    ConfigError,
    DataFormatError,
    DimensionError,
    PSDViolationError,
    SampleCountError,
    UndefinedCorrelationError,
)
from utils.tensor_core import (
    GradientContext,
    Parameter,
    ParameterStore,
    Tensor,
    adam_update_all,
    avg_pool2,
    conv2d,
    gaussian_init,
    linear,
    resize,
)

log = structlog.get_logger(__name__)

DEFAULT_SPLITS = 10
RECIP_FID_EPS = 1e-3
FEATURE_DIM = 64
MIN_ACCURACY = 0.9
SCORER_BETAS = (0.9, 0.999)


class RewardMetric(str, Enum):
    IS = "is"
    RECIP_FID = "recip_fid"


# ---------------------------------------------------------------------------
# Surrogate classifier
# ---------------------------------------------------------------------------

@dataclass
class SurrogateScorer:
    params: ParameterStore
    num_classes: int
    feature_dim: int
    resolution: int
    held_out_accuracy: float = float("nan")

    def _features(self, images: Tensor) -> Tensor:
        p = self.params
        x = resize(images, self.resolution)
        x = avg_pool2(torch.relu(conv2d(x, p["conv1.weight"].value, p["conv1.bias"].value, padding=1)))
        x = avg_pool2(torch.relu(conv2d(x, p["conv2.weight"].value, p["conv2.bias"].value, padding=1)))
        x = x.mean(dim=(2, 3))
        return torch.relu(linear(x, p["features.weight"].value, p["features.bias"].value))

    def _logits(self, images: Tensor) -> Tensor:
        return linear(self._features(images), self.params["head.weight"].value, self.params["head.bias"].value)

    def features(self, images: Tensor, batch_size: int = 250) -> Tensor:
        with torch.no_grad():
            return torch.cat([self._features(chunk) for chunk in images.split(batch_size)])

    def probabilities(self, images: Tensor, batch_size: int = 250) -> Tensor:
        with torch.no_grad():
            return torch.cat([torch.softmax(self._logits(chunk), dim=1) for chunk in images.split(batch_size)])

    def accuracy(self, images: Tensor, labels: Tensor) -> float:
        predicted = self.probabilities(images).argmax(dim=1)
        return float((predicted == labels).float().mean())


def _scorer_params(image_channels: int, num_classes: int, feature_dim: int, rng: torch.Generator) -> ParameterStore:
    gain = math.sqrt(2.0)
    shapes = {
        "conv1.weight": ((16, image_channels, 3, 3), image_channels * 9, gain),
        "conv2.weight": ((32, 16, 3, 3), 16 * 9, gain),
        "features.weight": ((feature_dim, 32), 32, gain),
        "head.weight": ((num_classes, feature_dim), feature_dim, 1.0),
    }
    params = {}
    for name, (shape, fan_in, g) in shapes.items():
        params[name] = Parameter(name, gaussian_init(shape, fan_in, g, rng))
        bias = name.replace(".weight", ".bias")
        params[bias] = Parameter(bias, torch.zeros(shape[0]))
    return params


def _degrade(images: Tensor, rng: torch.Generator) -> Tensor:
    """Down-then-up sample by a random factor so low-resolution stages look familiar."""
    res = images.shape[2]
    choices = [r for r in (res // 4, res // 2, res) if r >= 4]
    target = choices[int(torch.randint(0, len(choices), (1,), generator=rng).item())]
    return resize(resize(images, target), res)


def train_surrogate(
    dataset,
    epochs: int,
    rng: torch.Generator,
    eval_set=None,
    batch_size: int = 64,
    lr: float = 1e-3,
    feature_dim: int = FEATURE_DIM,
    min_accuracy: float = MIN_ACCURACY,
) -> SurrogateScorer:
    """
    1) Train the classifier with Adam on the labeled images.
    2) Check held-out accuracy (the last 10% of the set if no eval set is given).
    3) Freeze it: parameters stop requiring gradients.
    """
    if dataset.num_classes < 2:
        raise ConfigError("surrogate classifier needs at least two classes")
    images, labels = dataset.images, dataset.labels
    if eval_set is None:
        cut = int(len(labels) * 0.9)
        eval_images, eval_labels = images[cut:], labels[cut:]
        images, labels = images[:cut], labels[:cut]
    else:
        eval_images, eval_labels = eval_set.images, eval_set.labels

    scorer = SurrogateScorer(
        params=_scorer_params(images.shape[1], dataset.num_classes, feature_dim, rng),
        num_classes=dataset.num_classes,
        feature_dim=feature_dim,
        resolution=images.shape[2],
    )
    n = len(labels)
    for epoch in range(epochs):
        order = torch.randperm(n, generator=rng)
        running = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            batch = images[idx]
            if torch.rand(1, generator=rng).item() < 0.5:
                batch = _degrade(batch, rng)
            with GradientContext(scorer.params.values()) as ctx:
                loss = torch.nn.functional.cross_entropy(scorer._logits(batch), labels[idx])
                ctx.backward(loss)
            adam_update_all(scorer.params.values(), lr, SCORER_BETAS)
            running += float(loss.detach()) * len(idx)
        log.info("[metrics] surrogate epoch", epoch=epoch, loss=running / n)

    for param in scorer.params.values():
        param.value.requires_grad_(False)
    scorer.held_out_accuracy = scorer.accuracy(eval_images, eval_labels)
    log.info("[metrics] surrogate trained", accuracy=scorer.held_out_accuracy)
    if scorer.held_out_accuracy < min_accuracy:
        raise CalibrationError(
            f"surrogate classifier reached held-out accuracy {scorer.held_out_accuracy:.3f} < {min_accuracy}; "
            "increase surrogate_epochs or the training set size"
        )
    return scorer


# ---------------------------------------------------------------------------
# Inception score
# ---------------------------------------------------------------------------

def _as_float64(x) -> Tensor:
    return torch.as_tensor(np.asarray(x) if not isinstance(x, Tensor) else x, dtype=torch.float64)


def inception_score(probs, splits: int = DEFAULT_SPLITS) -> tuple[float, float]:
    """exp(E_x KL(p(y|x) || p(y))) per split; mean and std over splits.

    When N is not divisible by `splits` the last split takes the remainder.
    """
    p = _as_float64(probs)
    if p.dim() != 2 or p.shape[0] == 0:
        raise DimensionError(f"inception_score needs an N x C matrix, got shape {tuple(p.shape)}")
    if (p < 0).any() or not torch.allclose(p.sum(dim=1), torch.ones(p.shape[0], dtype=p.dtype), atol=1e-4):
        raise DataFormatError("every row of the probability matrix must be a distribution")
    n = p.shape[0]
    splits = max(1, min(splits, n))
    size = n // splits
    scores = []
    for k in range(splits):
        part = p[k * size:(k + 1) * size] if k < splits - 1 else p[k * size:]
        marginal = part.mean(dim=0, keepdim=True)
        kl = (torch.xlogy(part, part) - torch.xlogy(part, marginal.expand_as(part))).sum(dim=1)
        scores.append(math.exp(float(kl.mean())))
    return float(np.mean(scores)), float(np.std(scores))


# ---------------------------------------------------------------------------
# Frechet distance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianStats:
    mean: Tensor
    cov: Tensor

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def from_features(cls, features) -> "GaussianStats":
        f = _as_float64(features)
        if f.dim() != 2 or f.shape[0] < 2:
            raise SampleCountError(f"need at least 2 feature rows for a covariance, got shape {tuple(f.shape)}")
        return cls(f.mean(dim=0), torch.cov(f.T, correction=1))


def matrix_sqrt_psd(matrix) -> Tensor:
    """Symmetric PSD square root through a symmetric eigendecomposition."""
    m = _as_float64(matrix)
    if m.dim() != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"matrix_sqrt_psd needs a square matrix, got {tuple(m.shape)}")
    m = 0.5 * (m + m.T)
    eigenvalues, eigenvectors = torch.linalg.eigh(m)
    floor = -1e-6 * max(1.0, float(eigenvalues.abs().max()))
    if float(eigenvalues.min()) < floor:
        raise PSDViolationError(f"matrix has eigenvalue {float(eigenvalues.min()):.3e}, not positive semidefinite")
    root = eigenvalues.clamp(min=0.0).sqrt()
    s = (eigenvectors * root) @ eigenvectors.T
    return 0.5 * (s + s.T)


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The cross term is taken as Tr sqrt(S_a^(1/2) S_b S_a^(1/2)), which has the
    same trace and a symmetric PSD argument.
    """
    if a.dim != b.dim or a.cov.shape != b.cov.shape:
        raise DimensionError(f"Gaussian stats dimensions differ: {a.dim} vs {b.dim}")
    mean_a, mean_b = _as_float64(a.mean), _as_float64(b.mean)
    cov_a, cov_b = _as_float64(a.cov), _as_float64(b.cov)
    root_a = matrix_sqrt_psd(cov_a)
    cross = matrix_sqrt_psd(root_a @ cov_b @ root_a)
    diff = mean_a - mean_b
    distance = float(diff @ diff + torch.trace(cov_a) + torch.trace(cov_b) - 2.0 * torch.trace(cross))
    return max(distance, 0.0)


# ---------------------------------------------------------------------------
# Rewards and reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvaluationReport:
    is_mean: float
    is_std: float
    fid: float | None
    n_samples: int

    def reward(self, metric: RewardMetric, eps_r: float = RECIP_FID_EPS) -> float:
        if RewardMetric(metric) == RewardMetric.IS:
            return self.is_mean
        if self.fid is None:
            raise ConfigError("reciprocal-FID reward needs reference statistics")
        return 1.0 / (self.fid + eps_r)


def evaluate_images(
    images: Tensor,
    scorer: SurrogateScorer,
    reference_stats: GaussianStats | None = None,
    splits: int = DEFAULT_SPLITS,
    min_samples: int = 500,
) -> EvaluationReport:
    n = images.shape[0]
    if n < min_samples:
        raise SampleCountError(f"evaluation needs at least {min_samples} images, got {n}")
    is_mean, is_std = inception_score(scorer.probabilities(images), splits)
    fid = None
    if reference_stats is not None:
        fid = frechet_distance(GaussianStats.from_features(scorer.features(images)), reference_stats)
    return EvaluationReport(is_mean, is_std, fid, n)


def compute_reward(
    images: Tensor,
    scorer: SurrogateScorer,
    metric: RewardMetric | str,
    reference_stats: GaussianStats | None = None,
    min_samples: int = 500,
    eps_r: float = RECIP_FID_EPS,
    splits: int = DEFAULT_SPLITS,
) -> float:
    metric = RewardMetric(metric)
    stats = reference_stats if metric == RewardMetric.RECIP_FID else None
    report = evaluate_images(images, scorer, stats, splits, min_samples)
    return report.reward(metric, eps_r)


def spearman_rank_correlation(xs, ys) -> float:
    """Pearson correlation of tie-averaged ranks."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise DimensionError("spearman_rank_correlation needs two equal-length sequences of at least 2 values")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelationError("rank correlation is undefined for a constant sequence")
    rx, ry = rankdata(x, method="average"), rankdata(y, method="average")
    rx, ry = rx - rx.mean(), ry - ry.mean()
    rho = float((rx @ ry) / math.sqrt((rx @ rx) * (ry @ ry)))
    return max(-1.0, min(1.0, rho))
