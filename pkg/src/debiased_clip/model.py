"""Dual MLP encoder with a learnable temperature, zero-shot prediction and checkpoints."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Node, ParamStore


@dataclass(frozen=True)
class EncoderConfig:
    p: int
    q: int
    d: int
    depth: int = 2
    hidden: int | None = None  # defaults to 2 * d
    tau_init: float = 0.07
    seed: int = 0

    @property
    def hidden_width(self) -> int:
        return self.hidden if self.hidden is not None else 2 * self.d

    def layer_dims(self, tower: str) -> list[int]:
        n_in = self.p if tower == "image" else self.q
        return [n_in] + [self.hidden_width] * (self.depth - 1) + [self.d]

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class PromptSet:
    """Text features for each class prompt, kept sorted by class id."""

    features: np.ndarray
    class_ids: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        if self.class_ids is None:
            self.class_ids = np.arange(len(self.features))
        ids = np.asarray(self.class_ids, dtype=int)
        if len(ids) < 2:
            raise ValueError("PromptSet needs at least two prompts")
        if len(set(ids.tolist())) != len(ids):
            raise ValueError(f"PromptSet class ids must be unique, got {ids.tolist()}")
        if len(ids) != len(self.features):
            raise ValueError("PromptSet: one class id per prompt row")
        order = np.argsort(ids, kind="stable")
        self.class_ids = ids[order]
        self.features = self.features[order]

    def to_dict(self) -> dict:
        return {"class_ids": self.class_ids.tolist(), "features": self.features.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PromptSet":
        return cls(np.asarray(d["features"]), np.asarray(d["class_ids"]))


class DualEncoder:
    """Image and text MLP towers mapping into a shared d-dimensional space.

    Parameters are named ``image.W{i}``, ``image.b{i}``, ``text.W{i}``,
    ``text.b{i}`` and ``log_tau``. Hidden layers use tanh; the last layer is
    linear and embeddings are L2-normalized by default.
    """

    def __init__(self, config: EncoderConfig, params: ParamStore | None = None) -> None:
        if config.depth < 1:
            raise ValueError("encoder depth must be >= 1")
        if config.tau_init <= 0:
            raise ValueError("tau_init must be positive")
        self.config = config
        self.params = params if params is not None else self._init_params()

    def _init_params(self) -> ParamStore:
        rng = np.random.default_rng(self.config.seed)
        arrays = {}
        for tower in ("image", "text"):
            dims = self.config.layer_dims(tower)
            for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
                bound = 1.0 / np.sqrt(fan_in)
                arrays[f"{tower}.W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
                arrays[f"{tower}.b{i}"] = rng.uniform(-bound, bound, size=fan_out)
        arrays["log_tau"] = np.array(np.log(self.config.tau_init))
        return ParamStore(arrays)

    # -- parameter groups --------------------------------------------------

    def tower_names(self, tower: str) -> list[str]:
        return [n for n in self.params.names if n.startswith(tower + ".")]

    def scope_names(self, scope: str = "final") -> list[str]:
        """Image-encoder parameter names for a gradient scope.

        ``final`` is the last (projection) layer, ``all`` every image layer.
        """
        if scope == "all":
            return self.tower_names("image")
        if scope == "final":
            last = self.config.depth - 1
            return [f"image.W{last}", f"image.b{last}"]
        raise ValueError(f"unknown grad scope {scope!r}; expected 'final' or 'all'")

    @property
    def tau(self) -> float:
        return float(np.exp(self.params["log_tau"]))

    def tau_node(self) -> Node:
        return ad.exp(self.params.node("log_tau"))

    # -- forward -----------------------------------------------------------

    def _tower(self, tower: str, x, normalize: bool) -> Node:
        expected = self.config.p if tower == "image" else self.config.q
        x = ad.as_node(np.atleast_2d(np.asarray(x.value if isinstance(x, Node) else x)))
        if x.shape[1] != expected:
            raise ValueError(
                f"encode_{tower}: expected input dimension {expected}, got {x.shape[1]}"
            )
        h = x
        depth = self.config.depth
        for i in range(depth):
            h = ad.add(h @ self.params.node(f"{tower}.W{i}"), self.params.node(f"{tower}.b{i}"))
            if i < depth - 1:
                h = ad.tanh(h)
        return ad.l2norm_rows(h) if normalize else h

    def encode_image(self, x, normalize: bool = True) -> Node:
        return self._tower("image", x, normalize)

    def encode_text(self, t, normalize: bool = True) -> Node:
        return self._tower("text", t, normalize)

    def embed_images(self, x) -> np.ndarray:
        return self.encode_image(x).value

    def embed_texts(self, t) -> np.ndarray:
        return self.encode_text(t).value


# ----------------------------------------------------------------------------
# zero-shot classification
# ----------------------------------------------------------------------------


@dataclass
class ZeroShotResult:
    predictions: np.ndarray  # class ids
    cosines: np.ndarray  # (n, M), columns follow class_ids
    class_ids: np.ndarray
    scores: np.ndarray | None  # binary case only: logistic((cos_1 - cos_0) / tau)


def cosine_matrix(image_emb: np.ndarray, prompt_emb: np.ndarray) -> np.ndarray:
    image_emb = np.atleast_2d(image_emb)
    prompt_emb = np.atleast_2d(prompt_emb)
    ni = np.linalg.norm(image_emb, axis=1, keepdims=True)
    nt = np.linalg.norm(prompt_emb, axis=1, keepdims=True)
    if np.any(ni == 0) or np.any(nt == 0):
        raise ValueError("degenerate embedding")
    cos = (image_emb / ni) @ (prompt_emb / nt).T
    return np.clip(cos, -1.0, 1.0)


def predict_from_embeddings(
    image_emb: np.ndarray, prompt_emb: np.ndarray, class_ids=None, tau: float = 1.0
) -> ZeroShotResult:
    """Assign each image the class whose prompt embedding has the largest cosine.

    Ties go to the lowest class id. For two classes the continuous score is
    logistic((cos_1 - cos_0) / tau); with more classes ``scores`` is None.
    """
    prompt_emb = np.atleast_2d(prompt_emb)
    if len(prompt_emb) == 0:
        raise ValueError("zero-shot prediction needs at least one prompt")
    ids = np.arange(len(prompt_emb)) if class_ids is None else np.asarray(class_ids, dtype=int)
    order = np.argsort(ids, kind="stable")
    ids, prompt_emb = ids[order], prompt_emb[order]
    cos = cosine_matrix(image_emb, prompt_emb)
    preds = ids[np.argmax(cos, axis=1)]  # argmax returns the first maximum
    scores = None
    if len(ids) == 2:
        scores = expit((cos[:, 1] - cos[:, 0]) / tau)
    return ZeroShotResult(preds, cos, ids, scores)


def zero_shot_predict(model: DualEncoder, x, prompts: PromptSet) -> ZeroShotResult:
    image_emb = model.encode_image(x, normalize=False).value
    prompt_emb = model.encode_text(prompts.features, normalize=False).value
    return predict_from_embeddings(image_emb, prompt_emb, prompts.class_ids, model.tau)


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DBCLIPCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: DualEncoder, seed: int | None = None, meta: dict | None = None) -> None:
    """Write the model to a self-describing binary file.

    Layout (all integers little-endian):

    ======  =======  ===========================================================
    offset  size     content
    ======  =======  ===========================================================
    0       8        magic ``DBCLIPCK``
    8       4        uint32 format version (1)
    12      8        uint64 header length H
    20      H        UTF-8 JSON header: ``config``, ``config_hash`` (sha256 of
                     the sorted-key config JSON), ``seed``, ``meta`` and
                     ``params``: a list of ``{name, shape, offset, count}``
                     in sorted-name order, offsets counted in float64 items
    20+H    8*N      float64 little-endian values, each array row-major
    ======  =======  ===========================================================
    """
    params = model.params
    entries, offset = [], 0
    for name in params.names:
        arr = params[name]
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += int(arr.size)
    header = {
        "config": model.config.to_dict(),
        "config_hash": model.config.digest(),
        "seed": model.config.seed if seed is None else int(seed),
        "meta": meta or {},
        "params": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    data = params.flatten().astype("<f8").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(data)
    tmp.replace(path)


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh)


def _read_header(fh) -> dict:
    if fh.read(8) != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, length = struct.unpack("<IQ", fh.read(12))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    return json.loads(fh.read(length).decode("utf-8"))


def load_checkpoint(path) -> DualEncoder:
    with open(path, "rb") as fh:
        header = _read_header(fh)
        data = np.frombuffer(fh.read(), dtype="<f8")
    config = EncoderConfig(**header["config"])
    if config.digest() != header["config_hash"]:
        raise ValueError("checkpoint config hash mismatch")
    arrays = {}
    for e in header["params"]:
        chunk = data[e["offset"]:e["offset"] + e["count"]]
        arrays[e["name"]] = chunk.astype(np.float64).reshape(e["shape"])
    return DualEncoder(config, ParamStore(arrays))
