"""Embedding back-ends: cosine, Fisher LDA, centering+length-norm, PLDA.

PLDA is the two-covariance model x = mu + y + e with y ~ N(0, Phi_b) and
e ~ N(0, Phi_w), trained by EM on class-labeled embeddings and scored as the
same/different-speaker log-likelihood ratio in the simultaneously
diagonalized basis. All back-end statistics are estimated on training data
only; evaluation embeddings are never folded into means or covariances.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DegenerateInputError, InvalidArgumentError, NumericError

log = logging.getLogger(__name__)

EPS_NORM = 1e-12
RIDGE = 1e-8


@dataclass
class EmbeddingSet:
    """Parallel arrays of utterance metadata and row vectors."""

    utterance_ids: list
    speaker_ids: list
    language_ids: list
    vectors: np.ndarray  # (N, D)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        n = len(self.utterance_ids)
        if self.vectors.shape[0] != n or len(self.speaker_ids) != n or len(self.language_ids) != n:
            raise InvalidArgumentError("embedding metadata lengths disagree")
        if not np.all(np.isfinite(self.vectors)):
            raise InvalidArgumentError("embeddings contain non-finite values")

    def __len__(self):
        return len(self.utterance_ids)

    @property
    def dim(self):
        return self.vectors.shape[1]

    def by_utterance(self):
        return dict(zip(self.utterance_ids, self.vectors))

    @classmethod
    def from_archive(cls, path):
        from .archive import archive_stream

        ids, spks, langs, rows = [], [], [], []
        for feat in archive_stream(path):
            if feat.n_frames != 1:
                raise InvalidArgumentError(
                    f"embedding record {feat.utterance_id!r} has T={feat.n_frames}"
                )
            ids.append(feat.utterance_id)
            spks.append(feat.speaker_id)
            langs.append(feat.language_id)
            rows.append(feat.data[0])
        return cls(ids, spks, langs, np.array(rows))

    def to_archive(self, path):
        from .archive import archive_write
        from .frontend import FeatureMatrix

        archive_write(
            (
                FeatureMatrix(u, s, l, v[None, :])
                for u, s, l, v in zip(
                    self.utterance_ids, self.speaker_ids, self.language_ids, self.vectors
                )
            ),
            path,
        )


def cosine_score(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= EPS_NORM or nb <= EPS_NORM:
        raise DegenerateInputError("cosine of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def center_lengthnorm(vectors, mean) -> np.ndarray:
    """x -> (x - mean) / ||x - mean||, mean from the training set only."""
    x = np.asarray(vectors, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms <= EPS_NORM):
        bad = int(np.argmax(norms <= EPS_NORM))
        raise DegenerateInputError(f"embedding {bad} equals the centering mean")
    out = x / norms[:, None]
    return out[0] if single else out


def _scatters(x, labels):
    classes = sorted(set(labels))
    mu = x.mean(axis=0)
    d = x.shape[1]
    s_w = np.zeros((d, d))
    s_b = np.zeros((d, d))
    labels = np.asarray(labels)
    for cls in classes:
        xc = x[labels == cls]
        mc = xc.mean(axis=0)
        dev = xc - mc
        s_w += dev.T @ dev
        diff = (mc - mu)[:, None]
        s_b += xc.shape[0] * (diff @ diff.T)
    return s_b / x.shape[0], s_w / x.shape[0], mu, classes


@dataclass
class LDAProjection:
    mean: np.ndarray  # (D,)
    matrix: np.ndarray  # (D, K); projected within-class covariance is identity
    eigenvalues: np.ndarray  # (K,), descending


def train_lda(vectors, labels, k) -> LDAProjection:
    """Solve S_b v = lambda S_w v; keep the top-k whitening directions."""
    x = np.asarray(vectors, dtype=np.float64)
    s_b, s_w, mu, classes = _scatters(x, labels)
    if len(classes) < 2:
        raise InvalidArgumentError("LDA needs at least 2 classes")
    k_max = min(x.shape[1], len(classes) - 1)
    if not 1 <= k <= x.shape[1]:
        raise InvalidArgumentError(f"K={k} outside 1..{x.shape[1]}")
    if k > k_max:
        raise InvalidArgumentError(
            f"K={k} exceeds min(D, n_classes-1)={k_max}"
        )
    try:
        evals, evecs = scipy.linalg.eigh(s_b, s_w, check_finite=False)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        ridge = RIDGE * np.trace(s_w) / x.shape[1]
        log.info("LDA: within-class scatter singular, ridge %.3g added", ridge)
        evals, evecs = scipy.linalg.eigh(s_b, s_w + ridge * np.eye(x.shape[1]))
    order = np.argsort(evals)[::-1][:k]
    return LDAProjection(mean=mu, matrix=evecs[:, order], eigenvalues=evals[order])


def lda_project(lda: LDAProjection, vectors) -> np.ndarray:
    x = np.asarray(vectors, dtype=np.float64)
    if x.shape[-1] != lda.mean.shape[0]:
        raise InvalidArgumentError(
            f"LDA expects dim {lda.mean.shape[0]}, got {x.shape[-1]}"
        )
    return (x - lda.mean) @ lda.matrix


@dataclass
class PLDAModel:
    mu: np.ndarray  # (D,)
    phi_b: np.ndarray  # between-class covariance, PSD
    phi_w: np.ndarray  # within-class covariance, PD
    objective: list = field(default_factory=list)
    # simultaneous diagonalization cache: V^T phi_w V = I, V^T phi_b V = diag(psi)
    _v: np.ndarray = None
    _psi: np.ndarray = None

    def diagonalized(self):
        if self._v is None:
            psi, v = scipy.linalg.eigh(self.phi_b, self.phi_w, check_finite=False)
            self._psi = np.ascontiguousarray(np.maximum(psi[::-1], 0.0))
            self._v = np.ascontiguousarray(v[:, ::-1])
        return self._v, self._psi

    def transform(self, vectors):
        v, _ = self.diagonalized()
        return (np.atleast_2d(np.asarray(vectors, dtype=np.float64)) - self.mu) @ v


def _floor_spd(mat, floor):
    evals, evecs = np.linalg.eigh((mat + mat.T) / 2.0)
    if evals.min() >= floor:
        return (mat + mat.T) / 2.0, False
    return (evecs * np.maximum(evals, floor)) @ evecs.T, True


def _plda_loglik(x, labels, mu, phi_b, phi_w):
    """Exact marginal log-likelihood of the two-covariance model."""
    labels = np.asarray(labels)
    total = 0.0
    d = x.shape[1]
    sign, logdet_w = np.linalg.slogdet(phi_w)
    if sign <= 0:
        raise NumericError("within-class covariance lost positive definiteness")
    inv_w = np.linalg.inv(phi_w)
    by_n = {}
    for cls in sorted(set(labels)):
        xc = x[labels == cls] - mu
        by_n.setdefault(xc.shape[0], []).append(xc)
    for n, groups in by_n.items():
        cov_mean = phi_b + phi_w / n
        sign, logdet_m = np.linalg.slogdet(cov_mean)
        if sign <= 0:
            raise NumericError("mean covariance lost positive definiteness")
        inv_m = np.linalg.inv(cov_mean)
        for xc in groups:
            xbar = xc.mean(axis=0)
            dev = xc - xbar
            total += (
                -0.5 * (n - 1) * d * np.log(2 * np.pi)
                - 0.5 * (n - 1) * logdet_w
                - 0.5 * d * np.log(n)
                - 0.5 * float(np.einsum("ij,jk,ik->", dev, inv_w, dev))
                - 0.5 * d * np.log(2 * np.pi)
                - 0.5 * logdet_m
                - 0.5 * float(xbar @ inv_m @ xbar)
            )
    return total


def train_plda(vectors, labels, n_iters=10) -> PLDAModel:
    """EM for the two-covariance model; objective recorded per iteration.

    Classes with a single example still contribute (their posterior simply
    has more weight on the prior). The within-class covariance is
    eigenvalue-floored at 1e-8 if it loses definiteness.
    """
    x = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    if len(classes) < 2:
        raise InvalidArgumentError("PLDA needs at least 2 classes")
    counts = {cls: int((labels == cls).sum()) for cls in classes}
    if max(counts.values()) < 2:
        raise InvalidArgumentError("PLDA needs some class with >= 2 examples")
    n, d = x.shape
    mu = x.mean(axis=0)
    s_b, s_w, _, _ = _scatters(x, labels)
    phi_w, floored = _floor_spd(s_w, 1e-8)
    if floored:
        log.info("PLDA init: within-class covariance floored")
    # between scatter can be rank-deficient (rank <= classes-1); a small ridge
    # keeps the first E-step's inverse well defined
    eps_b = RIDGE * max(1.0, np.trace(s_b) / d)
    phi_b = (s_b + s_b.T) / 2.0 + eps_b * np.eye(d)
    model = PLDAModel(mu=mu, phi_b=phi_b, phi_w=phi_w)
    xc_by_class = {cls: x[labels == cls] - mu for cls in classes}
    for _ in range(n_iters + 1):
        model.objective.append(_plda_loglik(x, labels, mu, model.phi_b, model.phi_w))
        if len(model.objective) == n_iters + 1:
            break
        inv_b = np.linalg.inv(model.phi_b)
        inv_w = np.linalg.inv(model.phi_w)
        acc_b = np.zeros((d, d))
        acc_w = np.zeros((d, d))
        post_cov = {
            cnt: np.linalg.inv(inv_b + cnt * inv_w) for cnt in set(counts.values())
        }
        for cls in classes:
            xc = xc_by_class[cls]
            cnt = xc.shape[0]
            cov = post_cov[cnt]
            y_hat = cov @ (inv_w @ (cnt * xc.mean(axis=0)))
            acc_b += cov + np.outer(y_hat, y_hat)
            dev = xc - y_hat
            acc_w += dev.T @ dev + cnt * cov
        phi_b, _ = _floor_spd(acc_b / len(classes), 0.0)
        phi_w, floored = _floor_spd(acc_w / n, 1e-8)
        if floored:
            log.info("PLDA M-step: within-class covariance floored")
        model.phi_b, model.phi_w = phi_b, phi_w
        model._v = None
    model.diagonalized()
    return model


def _llr_terms(model: PLDAModel):
    _, psi = model.diagonalized()
    s = 1.0 + psi
    c = psi
    denom = s * s - c * c
    k0 = float(np.sum(np.log(s) - 0.5 * np.log(denom)))
    q = 0.5 * (1.0 / s - s / denom)
    p = c / denom
    return k0, q, p


def plda_score(model: PLDAModel, enroll, test) -> float:
    """log p(enroll,test | same speaker) - log p(enroll,test | different)."""
    return float(plda_score_pairs(model, np.atleast_2d(enroll), np.atleast_2d(test))[0])


def plda_score_pairs(model: PLDAModel, enroll, test) -> np.ndarray:
    """Scores for row-aligned pairs of embeddings."""
    ua = model.transform(enroll)
    ub = model.transform(test)
    if ua.shape != ub.shape:
        raise InvalidArgumentError("enroll/test shapes differ")
    k0, q, p = _llr_terms(model)
    scores = k0 + (ua**2) @ q + (ub**2) @ q + ((ua * p) * ub).sum(axis=1)
    if not np.all(np.isfinite(scores)):
        raise NumericError("non-finite PLDA score")
    return scores


def plda_score_matrix(model: PLDAModel, enroll, test) -> np.ndarray:
    """(n_enroll, n_test) score matrix."""
    ua = model.transform(enroll)
    ub = model.transform(test)
    k0, q, p = _llr_terms(model)
    return k0 + ((ua**2) @ q)[:, None] + ((ub**2) @ q)[None, :] + (ua * p) @ ub.T


class CosineScorer:
    """Cosine over (optionally projected) embeddings."""

    def __init__(self, lda: LDAProjection = None):
        self.lda = lda

    def _prep(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.lda is not None:
            x = lda_project(self.lda, x)
        norms = np.linalg.norm(x, axis=1)
        if np.any(norms <= EPS_NORM):
            raise DegenerateInputError("cosine of a zero vector")
        return x / norms[:, None]

    def score_pairs(self, enroll, test):
        return (self._prep(enroll) * self._prep(test)).sum(axis=1)

    def score(self, enroll, test):
        return float(self.score_pairs(enroll, test)[0])


class PLDAScorer:
    def __init__(self, model: PLDAModel):
        self.model = model

    def score_pairs(self, enroll, test):
        return plda_score_pairs(self.model, enroll, test)

    def score(self, enroll, test):
        return plda_score(self.model, enroll, test)
