"""Frame-level phone classifier and the low-rank linguistic-factor extractor.

The classifier is a small stack of time-delay layers (with pnorm
nonlinearities) over log-mel input, ending in an affine map onto the phone
set. A rank-r SVD of that final affine transform gives the factor extractor:
per frame, factor = sqrt(S_r) V_r^T h where h is the last hidden activation.
The balanced square-root split is the default; V_r^T h is available as the
"unbalanced" variant.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .frontend import FeatureMatrix
from .nn import LayerSpec, NetworkGraph, TrainState, train
from .ctdnn import ChunkDataset

log = logging.getLogger(__name__)


@dataclass
class PhoneNetConfig:
    n_phones: int
    n_mels: int = 40
    td_offsets: tuple = (-2, 0, 2)
    td_hidden: int = 256
    pnorm_group: int = 2
    n_stages: int = 2

    def validate(self):
        if self.n_phones < 1:
            raise InvalidArgumentError("need at least 1 phone")
        if self.td_hidden % self.pnorm_group:
            raise InvalidArgumentError("td_hidden must divide by the pnorm group size")


def build_phone_classifier(config: PhoneNetConfig, seed=0, dtype=np.float32) -> NetworkGraph:
    config.validate()
    specs = []
    for _ in range(config.n_stages):
        specs.append(LayerSpec("timedelay", offsets=list(config.td_offsets),
                               dim=config.td_hidden))
        specs.append(LayerSpec("pnorm", group=config.pnorm_group))
    specs.append(LayerSpec("affine", dim=config.n_phones))
    specs.append(LayerSpec("softmax-xent"))
    return NetworkGraph(specs, ("vec", config.n_mels), seed=seed, dtype=dtype)


def hidden_layer_index(graph: NetworkGraph) -> int:
    """Index of the last hidden layer (input to the final affine)."""
    return len(graph.layers) - 3


def final_affine(graph: NetworkGraph) -> np.ndarray:
    """The final affine transform in math orientation: (n_phones, hidden)."""
    return graph.layers[-2].params["W"].T.astype(np.float64)


def make_phone_dataset(feats, labels_by_utt, chunk_frames=32, batch_chunks=8,
                       val_fraction=0.05, seed=0):
    """ChunkDataset over (frames, per-frame labels); labels ride in the chunk."""
    items = []
    for feat in feats:
        labels = np.asarray(labels_by_utt[feat.utterance_id], dtype=np.int64)
        if labels.shape[0] != feat.n_frames:
            raise InvalidArgumentError(
                f"{feat.utterance_id}: {labels.shape[0]} labels for {feat.n_frames} frames"
            )
        items.append((feat.data.astype(np.float32), labels, 0))
    return _FrameLabelDataset(items, chunk_frames, batch_chunks, val_fraction, seed)


class _FrameLabelDataset(ChunkDataset):
    """ChunkDataset variant whose labels are per-frame, stored in the aux slot."""

    def _make_chunk(self, item, start):
        frames, labels, _ = item
        idx = self._window(item, start)
        return frames[idx], None, labels[idx]


def train_phone_classifier(graph: NetworkGraph, dataset, state: TrainState):
    n_out = graph.output_shape[1]
    all_labels = np.concatenate(
        [item[1] for item in dataset.train_items + dataset.val_items]
    )
    if all_labels.min() < 0 or all_labels.max() >= n_out:
        raise InvalidArgumentError(f"phone labels must lie within 0..{n_out - 1}")
    return train(graph, dataset, state)


def jacobi_svd(a: np.ndarray, tol=1e-10, max_sweeps=60):
    """One-sided Jacobi SVD of a (m x n, m >= n) matrix: a = U diag(s) V^T.

    Rotates column pairs until the off-diagonal mass of A^T A is below
    ``tol`` relative to its diagonal. Returns U (m x n), s (n,) descending,
    V (n x n).
    """
    a = np.array(a, dtype=np.float64)
    m, n = a.shape
    if m < n:
        raise InvalidArgumentError("jacobi_svd expects m >= n")
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[:, p] @ a[:, q]
                app = a[:, p] @ a[:, p]
                aqq = a[:, q] @ a[:, q]
                off = max(off, abs(apq) / max(np.sqrt(app * aqq), 1e-300))
                if abs(apq) <= tol * np.sqrt(app * aqq):
                    continue
                tau = (aqq - app) / (2.0 * apq)
                t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                rot = np.array([[c, s], [-s, c]])
                a[:, [p, q]] = a[:, [p, q]] @ rot
                v[:, [p, q]] = v[:, [p, q]] @ rot
        if off <= tol:
            break
    sigma = np.linalg.norm(a, axis=0)
    order = np.argsort(sigma)[::-1]
    sigma = sigma[order]
    v = v[:, order]
    u = a[:, order]
    nonzero = sigma > 1e-300
    u[:, nonzero] /= sigma[nonzero]
    return u, sigma, v


@dataclass
class LinguisticFactorExtractor:
    """Truncated factors of the classifier's final affine transform."""

    v_r: np.ndarray  # (hidden, r), orthonormal columns
    s_r: np.ndarray  # (r,), non-increasing, >= 0
    rank: int
    balanced: bool = True

    def __post_init__(self):
        if np.any(np.diff(self.s_r) > 1e-12):
            raise InvalidArgumentError("singular values must be non-increasing")
        gram = self.v_r.T @ self.v_r
        if np.abs(gram - np.eye(self.rank)).max() > 1e-6:
            raise InvalidArgumentError("V_r columns must be orthonormal within 1e-6")


def svd_decompose(graph: NetworkGraph, rank=40, balanced=True) -> LinguisticFactorExtractor:
    """Best rank-r factors of the final affine: W ~ U_r S_r V_r^T (Frobenius)."""
    w = final_affine(graph)  # (P, H)
    r_max = min(w.shape)
    if not 1 <= rank <= r_max:
        raise InvalidArgumentError(f"rank {rank} outside 1..{r_max}")
    # one-sided Jacobi needs m >= n; W^T is (H, P) with H >= P in our nets,
    # and W^T = U' S V'^T gives W = V' S U'^T, so V_r comes from U'.
    if w.shape[0] <= w.shape[1]:
        u_t, s, v_t = jacobi_svd(w.T)
        v_full = u_t
    else:
        u, s, v = jacobi_svd(w)
        v_full = v
    return LinguisticFactorExtractor(
        v_r=v_full[:, :rank].copy(), s_r=s[:rank].copy(), rank=rank, balanced=balanced
    )


def reconstruct_low_rank(graph: NetworkGraph, extractor: LinguisticFactorExtractor):
    """U_r S_r V_r^T, the rank-r approximation of the final affine (P x H)."""
    w = final_affine(graph)
    u_r = w @ extractor.v_r / np.maximum(extractor.s_r, 1e-300)
    return (u_r * extractor.s_r) @ extractor.v_r.T


def hidden_activations(graph: NetworkGraph, feat: FeatureMatrix) -> np.ndarray:
    """Last hidden activation per frame, (T, hidden)."""
    if feat.dim != graph.input_shape[1]:
        raise InvalidArgumentError(
            f"classifier expects dim {graph.input_shape[1]}, got {feat.dim}"
        )
    out = graph.forward(feat.data[None, :, :], upto=hidden_layer_index(graph))
    return out[0].astype(np.float64)


def linguistic_factor(extractor: LinguisticFactorExtractor, graph: NetworkGraph,
                      feat: FeatureMatrix) -> np.ndarray:
    """Per-frame factor, (T, r): sqrt(S_r) V_r^T h (or V_r^T h unbalanced)."""
    h = hidden_activations(graph, feat)
    proj = h @ extractor.v_r
    if extractor.balanced:
        proj = proj * np.sqrt(extractor.s_r)
    return proj


def save_extractor(path, extractor: LinguisticFactorExtractor):
    from . import archive

    archive.save_checkpoint(
        path,
        {"kind": "svd-factor", "section": "SVDF", "rank": extractor.rank,
         "balanced": extractor.balanced},
        {"SVDF.V_r": extractor.v_r, "SVDF.S_r": extractor.s_r},
    )


def load_extractor(path) -> LinguisticFactorExtractor:
    from . import archive

    header, tensors = archive.load_checkpoint(path)
    return LinguisticFactorExtractor(
        v_r=tensors["SVDF.V_r"], s_r=tensors["SVDF.S_r"],
        rank=header["rank"], balanced=header["balanced"],
    )
