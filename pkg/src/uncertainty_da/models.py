"""The three networks: feature extractor, classifier and domain discriminator."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import DETERMINISTIC, DropoutSpec, Tensor
from .rng import stream_rng, stream_seed

CHECKPOINT_MAGIC = b"UDAC"
CHECKPOINT_VERSION = 1

# dropout stream ids are offset per network so masks never collide
_STREAM_BASE = {"feature_extractor": 100, "classifier": 200, "discriminator": 300}


class SpecMismatchError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    """Fully connected stack. ``layer_dims = [in, h1, ..., out]``.

    Hidden layers get ReLU; the output layer only if ``activate_output``.
    ``dropout_after`` lists layer indices whose output is dropped out.
    """

    layer_dims: tuple
    dropout_after: tuple = ()
    dropout_p: float = 0.0
    activate_output: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        object.__setattr__(self, "dropout_after", tuple(int(i) for i in self.dropout_after))
        if len(self.layer_dims) < 1 or any(d < 1 for d in self.layer_dims):
            raise ValueError(f"bad layer_dims {self.layer_dims}")
        n_layers = len(self.layer_dims) - 1
        bad = [i for i in self.dropout_after if not 0 <= i < n_layers]
        if bad:
            raise ValueError(f"dropout indices {bad} out of range for {n_layers} layers")
        if not 0 <= self.dropout_p < 1:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def n_params(self) -> int:
        dims = self.layer_dims
        return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_dims"] = list(self.layer_dims)
        d["dropout_after"] = list(self.dropout_after)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


@dataclass
class DenseLayer:
    weight: Tensor
    bias: Tensor


class Network:
    def __init__(self, spec: NetworkSpec, name: str, seed: int = 0, init: str = "uniform"):
        self.spec = spec
        self.name = name
        self.seed = seed
        rng = stream_rng(seed, f"init/{name}")
        self.layers: list[DenseLayer] = []
        for fan_in, fan_out in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
            if init == "zeros":
                w, b = np.zeros((fan_in, fan_out)), np.zeros(fan_out)
            elif init == "uniform":
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
                b = rng.uniform(-bound, bound, size=fan_out)
            else:
                raise ValueError(f"unknown init {init!r}")
            self.layers.append(DenseLayer(ag.parameter(w), ag.parameter(b)))
        base = _STREAM_BASE.get(name, 900)
        self.dropouts = {i: DropoutSpec(spec.dropout_p, base + i) for i in spec.dropout_after}

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.layers for t in (layer.weight, layer.bias)]

    def forward(self, x: Tensor, mode: str = DETERMINISTIC, step: int = 0,
                passes: Sequence[int] | int = 0, dropout_seed: int = 0,
                detach_params: bool = False, tile: bool = True) -> Tensor:
        """Run the stack.

        With several ``passes`` the input is tiled once per pass (or, with
        ``tile=False``, is taken to be already stacked pass-major) and each
        block gets its own dropout masks.
        """
        x = ag.as_tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.spec.in_dim:
            raise ag.ShapeError(f"{self.name}: expected [B x {self.spec.in_dim}], got {x.shape}")
        passes = [passes] if np.ndim(passes) == 0 else list(passes)
        if tile and len(passes) > 1:
            x = ag.concat([x] * len(passes), axis=0)
        h = x
        last = self.spec.n_layers - 1
        for i, layer in enumerate(self.layers):
            w, b = layer.weight, layer.bias
            if detach_params:
                w, b = w.detach(), b.detach()
            h = ag.dense_forward(h, w, b)
            if i < last or self.spec.activate_output:
                h = ag.relu(h)
            if i in self.dropouts:
                h = ag.dropout(h, self.dropouts[i], mode, step, passes, dropout_seed)
        return h

    __call__ = forward


def default_specs(input_dim: int, n_classes: int, uncertainty_dim: int = 1,
                  feature_layers: Sequence[int] = (128, 64),
                  discriminator_layers: Sequence[int] = (32,), dropout_p: float = 0.5,
                  discriminator_dropout: bool = False) -> dict:
    feature_layers = tuple(feature_layers)
    g_dims = (input_dim, *feature_layers)
    feat = g_dims[-1]
    d_dims = (feat + uncertainty_dim, *discriminator_layers, 1)
    return {
        "feature_extractor": NetworkSpec(g_dims, tuple(range(len(g_dims) - 1)), dropout_p, True),
        "classifier": NetworkSpec((feat, n_classes), (), dropout_p, False),
        "discriminator": NetworkSpec(
            d_dims,
            tuple(range(len(d_dims) - 2)) if discriminator_dropout else (),
            dropout_p if discriminator_dropout else 0.0,
            False,
        ),
    }


@dataclass
class ModelBundle:
    """Feature extractor, classifier and discriminator sharing one root seed."""

    feature_extractor: Network
    classifier: Network
    discriminator: Network
    seed: int = 0
    uncertainty_dim: int = 1
    step: int = 0
    meta: dict = field(default_factory=dict)

    @classmethod
    def build(cls, specs: dict, seed: int = 0, uncertainty_dim: int = 1,
              init: str = "uniform") -> "ModelBundle":
        g, c, d = (specs[k] for k in ("feature_extractor", "classifier", "discriminator"))
        if c.in_dim != g.out_dim:
            raise SpecMismatchError(f"classifier input {c.in_dim} != feature dim {g.out_dim}")
        if d.in_dim != g.out_dim + uncertainty_dim:
            raise SpecMismatchError(
                f"discriminator input {d.in_dim} != feature dim {g.out_dim} + "
                f"uncertainty dim {uncertainty_dim}"
            )
        if d.out_dim != 1:
            raise SpecMismatchError("discriminator must emit one logit")
        return cls(
            Network(g, "feature_extractor", seed, init),
            Network(c, "classifier", seed, init),
            Network(d, "discriminator", seed, init),
            seed=seed,
            uncertainty_dim=uncertainty_dim,
        )

    @property
    def networks(self) -> tuple:
        return (self.feature_extractor, self.classifier, self.discriminator)

    @property
    def specs(self) -> dict:
        return {n.name: n.spec for n in self.networks}

    @property
    def dropout_seed(self) -> int:
        return stream_seed(self.seed, "dropout")

    @property
    def eval_dropout_seed(self) -> int:
        return stream_seed(self.seed, "eval-dropout")

    @property
    def n_classes(self) -> int:
        return self.classifier.spec.out_dim

    def parameters(self) -> list[Tensor]:
        return [p for net in self.networks for p in net.parameters()]

    def adapted_parameters(self) -> list[Tensor]:
        """Feature extractor and classifier parameters (no discriminator)."""
        return self.feature_extractor.parameters() + self.classifier.parameters()

    def extract_features(self, x, mode: str = DETERMINISTIC, step: int = 0,
                         pass_index: Sequence[int] | int = 0, eval_streams: bool = False) -> Tensor:
        seed = self.eval_dropout_seed if eval_streams else self.dropout_seed
        return self.feature_extractor(x, mode, step, pass_index, seed)

    def classify(self, features, mode: str = DETERMINISTIC, step: int = 0,
                 pass_index: Sequence[int] | int = 0, eval_streams: bool = False,
                 detach_params: bool = False) -> Tensor:
        """Raw logits. Temperatures are applied by the caller."""
        seed = self.eval_dropout_seed if eval_streams else self.dropout_seed
        return self.classifier(features, mode, step, pass_index, seed, detach_params, tile=False)

    def discriminate(self, features: Tensor, uncertainty=None, coeff: float = 1.0,
                     mode: str = DETERMINISTIC, step: int = 0) -> Tensor:
        """P(domain = source) per row, shape ``[B]``.

        ``uncertainty`` is treated as a constant input; the reversal layer sits
        between the (features, uncertainty) concatenation and the discriminator.
        """
        features = ag.as_tensor(features)
        if self.uncertainty_dim:
            if uncertainty is None:
                raise ag.ShapeError("discriminator expects an uncertainty input")
            u = np.asarray(uncertainty.data if isinstance(uncertainty, Tensor) else uncertainty,
                           dtype=np.float64)
            u = u.reshape(features.shape[0], -1)
            if u.shape[1] != self.uncertainty_dim:
                raise ag.ShapeError(
                    f"uncertainty has {u.shape[1]} columns, discriminator wants {self.uncertainty_dim}"
                )
            h = ag.concat([features, Tensor(u)], axis=1)
        else:
            h = features
        h = ag.gradient_reversal(h, coeff)
        logit = self.discriminator(h, mode, step, 0, self.dropout_seed)
        return ag.sigmoid(ag.reshape(logit, (-1,)))

    # checkpoint ---------------------------------------------------------

    def save(self, path, step: int | None = None, meta: dict | None = None) -> None:
        header = {
            "format_version": CHECKPOINT_VERSION,
            "specs": {k: s.to_dict() for k, s in self.specs.items()},
            "seed": int(self.seed),
            "step": int(self.step if step is None else step),
            "uncertainty_dim": int(self.uncertainty_dim),
            "meta": meta if meta is not None else self.meta,
        }
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
            f.write(blob)
            for p in self.parameters():
                arr = np.ascontiguousarray(p.data, dtype="<f8").ravel()
                f.write(struct.pack("<Q", arr.size))
                f.write(arr.tobytes())

    @classmethod
    def load(cls, path) -> "ModelBundle":
        raw = Path(path).read_bytes()
        if raw[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
        try:
            version, hlen = struct.unpack_from("<II", raw, 4)
        except struct.error as exc:
            raise CheckpointError(f"{path}: truncated header") from exc
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        header = json.loads(raw[off:off + hlen].decode())
        off += hlen
        specs = {k: NetworkSpec.from_dict(v) for k, v in header["specs"].items()}
        bundle = cls.build(specs, header["seed"], header["uncertainty_dim"])
        bundle.step = header["step"]
        bundle.meta = header.get("meta", {})
        for p in bundle.parameters():
            try:
                (count,) = struct.unpack_from("<Q", raw, off)
            except struct.error as exc:
                raise CheckpointError(f"{path}: truncated parameter table") from exc
            off += 8
            if count != p.size or off + 8 * count > len(raw):
                raise CheckpointError(f"{path}: parameter of {count} values, expected {p.size}")
            p.data = np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(p.shape)
            off += 8 * count
        if off != len(raw):
            raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
        return bundle


def check_specs(expected: dict, found: dict) -> None:
    """Raise SpecMismatchError listing every differing field."""
    diffs = []
    for name in ("feature_extractor", "classifier", "discriminator"):
        e, f = expected[name].to_dict(), found[name].to_dict()
        for key in e:
            if e[key] != f[key]:
                diffs.append(f"{name}.{key}: expected {e[key]}, checkpoint has {f[key]}")
    if diffs:
        raise SpecMismatchError("network spec mismatch: " + "; ".join(diffs))
