"""Backbone with a shallow/deep split and gated dual-expert residual blocks.

Expert 0 is a position-aware two-conv path; Expert 1 collapses space through
pooled channel attention and is therefore invariant to spatial permutations.
A retrieval-mode gate picks the mixing weight: whole-image queries route
through Expert 0 (w0 = 1), region queries through Expert 1 (w0 = alpha,
default 0). Two hash heads (batch-normalized embeddings into a spline layer)
produce the global and local codes.

Spatial contract: the shallow stage downsamples by exactly 4, the deep stage
by another 4. All box-to-feature coordinate mapping elsewhere assumes the
shallow /4.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .kanhash import KanLayer, kan_forward, sign_with_tie
from .numerics import (
    ShapeError,
    Tensor,
    add,
    batch_stats_norm,
    conv2d,
    dense,
    global_avg_pool,
    global_max_pool,
    maxpool2d,
    mul,
    no_grad,
    relu,
    reshape,
    seeded_rng,
    sigmoid,
    slice_spatial,
)
from .retrieval import BoundingBox, FeatureBox, map_box_to_feature, pack_signs

CHECKPOINT_MAGIC = b"HMAR0001"
CA_REDUCTION = 4


@dataclass
class BackboneConfig:
    input_size: int = 64
    in_channels: int = 1
    shallow_channels: int = 32
    deep_channels: int = 64
    blocks_shallow: int = 2
    blocks_deep: int = 2
    downsample_factor_shallow: int = 4
    num_classes: int = 8

    def __post_init__(self):
        if self.input_size % self.downsample_factor_shallow != 0:
            raise ShapeError(f"input size {self.input_size} not divisible by "
                             f"{self.downsample_factor_shallow}")
        if self.downsample_factor_shallow != 4:
            # box-to-feature mapping hardcodes divisor 4
            raise ValueError("shallow downsample factor must be 4")
        if self.shallow_channels % CA_REDUCTION != 0:
            raise ValueError(f"shallow_channels must divide by {CA_REDUCTION}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "input_size", "in_channels", "shallow_channels", "deep_channels",
            "blocks_shallow", "blocks_deep", "downsample_factor_shallow", "num_classes")}


@dataclass
class RetrievalMode:
    """Global (whole image) or Local (needs a bbox); alpha is the residual
    Expert 0 weight kept in local mode."""

    mode: str
    alpha: float = 0.0
    bbox: BoundingBox | None = None

    def __post_init__(self):
        if self.mode not in ("global", "local"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha {self.alpha} outside [0,1]")
        if self.mode == "local" and self.bbox is None:
            raise ValueError("local mode requires a bbox")
        if self.mode == "global" and self.bbox is not None:
            raise ValueError("global mode takes no bbox")

    @classmethod
    def global_(cls) -> "RetrievalMode":
        return cls(mode="global")

    @classmethod
    def local(cls, bbox: BoundingBox, alpha: float = 0.0) -> "RetrievalMode":
        return cls(mode="local", alpha=alpha, bbox=bbox)


def mode_gate(mode: RetrievalMode) -> float:
    """Mixing weight w0 on Expert 0: 1 for global queries, alpha for local.

    Note the naming decides the routing: Expert 0 is the whole-image expert,
    so global mode gives it full weight.
    """
    if mode.mode == "global":
        return 1.0
    return mode.alpha


def _he_conv(rng: np.random.Generator, out_c: int, in_c: int, k: int) -> np.ndarray:
    fan_in = in_c * k * k
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_c, in_c, k, k))


def _he_dense(rng: np.random.Generator, out_d: int, in_d: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / in_d), size=(out_d, in_d))


def tensor_seed(seed: int, name: str) -> int:
    """Stable per-tensor init stream: the global seed plus the name's CRC."""
    return int(seeded_rng(seed, zlib.crc32(name.encode())).integers(0, 2**63))


class Model:
    """Parameter store plus the forward graph. `params` holds trainable
    tensors by name; `buffers` holds batch-norm running stats keyed by the
    norm's name prefix."""

    def __init__(self, config: BackboneConfig, bits: int, seed: int = 0):
        if bits < 1:
            raise ValueError(f"bits must be >= 1, got {bits}")
        self.config = config
        self.bits = bits
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, dict[str, np.ndarray]] = {}
        # when set, only these norm prefixes update running stats in training
        self.running_update_filter: set[str] | None = None
        self.kan_global = KanLayer(in_dim=config.deep_channels, out_bits=bits)
        self.kan_local = KanLayer(in_dim=config.shallow_channels, out_bits=bits)
        self._init_params()

    # -- construction ------------------------------------------------------

    def _param(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def _bn(self, prefix: str, channels: int) -> None:
        self._param(f"{prefix}.gamma", np.ones(channels))
        self._param(f"{prefix}.beta", np.zeros(channels))
        self.buffers[prefix] = {"mean": np.zeros(channels), "var": np.ones(channels)}

    def _conv(self, prefix: str, out_c: int, in_c: int, k: int) -> None:
        rng = seeded_rng(self.seed, zlib.crc32(f"{prefix}.w".encode()))
        self._param(f"{prefix}.w", _he_conv(rng, out_c, in_c, k))
        self._param(f"{prefix}.b", np.zeros(out_c))

    def _ca(self, prefix: str, channels: int) -> None:
        mid = channels // CA_REDUCTION
        rng1 = seeded_rng(self.seed, zlib.crc32(f"{prefix}.fc1.w".encode()))
        rng2 = seeded_rng(self.seed, zlib.crc32(f"{prefix}.fc2.w".encode()))
        self._param(f"{prefix}.fc1.w", _he_dense(rng1, mid, channels))
        self._param(f"{prefix}.fc1.b", np.zeros(mid))
        self._param(f"{prefix}.fc2.w", _he_dense(rng2, channels, mid))
        self._param(f"{prefix}.fc2.b", np.zeros(channels))

    def _init_params(self) -> None:
        cfg = self.config
        self._conv("stem.conv", cfg.shallow_channels, cfg.in_channels, 3)
        self._bn("stem.bn", cfg.shallow_channels)
        for i in range(cfg.blocks_shallow):
            p = f"shallow{i}"
            self._conv(f"{p}.expert0.conv1", cfg.shallow_channels, cfg.shallow_channels, 3)
            self._bn(f"{p}.expert0.bn1", cfg.shallow_channels)
            self._conv(f"{p}.expert0.conv2", cfg.shallow_channels, cfg.shallow_channels, 3)
            self._bn(f"{p}.expert0.bn2", cfg.shallow_channels)
            self._ca(f"{p}.expert1.ca", cfg.shallow_channels)
        in_c = cfg.shallow_channels
        for i in range(cfg.blocks_deep):
            p = f"deep{i}"
            out_c = cfg.deep_channels
            self._conv(f"{p}.down.conv", out_c, in_c, 3)
            self._bn(f"{p}.down.bn", out_c)
            self._conv(f"{p}.res.conv1", out_c, out_c, 3)
            self._bn(f"{p}.res.bn1", out_c)
            self._conv(f"{p}.res.conv2", out_c, out_c, 3)
            self._bn(f"{p}.res.bn2", out_c)
            in_c = out_c
        rng = seeded_rng(self.seed, zlib.crc32(b"classifier.w"))
        self._param("classifier.w",
                    rng.normal(0.0, np.sqrt(1.0 / cfg.deep_channels),
                               size=(cfg.num_classes, cfg.deep_channels)))
        self._param("classifier.b", np.zeros(cfg.num_classes))
        self._bn("kan_global.bn", cfg.deep_channels)
        self._bn("kan_local.bn", cfg.shallow_channels)
        self.kan_global.init_params(tensor_seed(self.seed, "kan_global.coeffs"))
        self.kan_local.init_params(tensor_seed(self.seed, "kan_local.coeffs"))
        self.kan_global.coeffs.name = "kan_global.coeffs"
        self.kan_local.coeffs.name = "kan_local.coeffs"
        self.params["kan_global.coeffs"] = self.kan_global.coeffs
        self.params["kan_local.coeffs"] = self.kan_local.coeffs

    # -- forward pieces ----------------------------------------------------

    def _bn_apply(self, x: Tensor, prefix: str, training: bool) -> Tensor:
        update = (self.running_update_filter is None
                  or prefix in self.running_update_filter)
        return batch_stats_norm(x, self.params[f"{prefix}.gamma"],
                                self.params[f"{prefix}.beta"],
                                running=self.buffers[prefix], training=training,
                                update_running=update)

    def _expert0(self, x: Tensor, prefix: str, training: bool) -> Tensor:
        h = conv2d(x, self.params[f"{prefix}.conv1.w"], self.params[f"{prefix}.conv1.b"],
                   stride=1, padding=1)
        h = relu(self._bn_apply(h, f"{prefix}.bn1", training))
        h = conv2d(h, self.params[f"{prefix}.conv2.w"], self.params[f"{prefix}.conv2.b"],
                   stride=1, padding=1)
        return self._bn_apply(h, f"{prefix}.bn2", training)

    def ca_forward(self, pooled: Tensor, prefix: str) -> Tensor:
        """Bottleneck gate on pooled channel stats: gate = sigmoid(fc2(relu(
        fc1(pooled)))), output gate * pooled. `pooled` is [N, C]."""
        h = relu(dense(pooled, self.params[f"{prefix}.fc1.w"], self.params[f"{prefix}.fc1.b"]))
        gate = sigmoid(dense(h, self.params[f"{prefix}.fc2.w"], self.params[f"{prefix}.fc2.b"]))
        return mul(gate, pooled)

    def expert1_forward(self, x: Tensor, ca_prefix: str) -> Tensor:
        """CA(AvgPool(x) + MaxPool(x)) -> [N,C,1,1]. Spatial order never
        enters: both pools are permutation-invariant."""
        n, c = x.data.shape[0], x.data.shape[1]
        pooled = add(global_avg_pool(x), global_max_pool(x))
        gated = self.ca_forward(reshape(pooled, (n, c)), ca_prefix)
        return reshape(gated, (n, c, 1, 1))

    def moe_block_forward(self, x: Tensor, block_prefix: str, w0: float,
                          training: bool = False) -> Tensor:
        """x + w0*Expert0(x) + (1-w0)*Expert1(x), Expert 1 broadcast over
        space. At the gate endpoints the unused expert is never evaluated,
        so its parameters get exactly zero gradient."""
        if not 0.0 <= w0 <= 1.0:
            raise ValueError(f"gate weight {w0} outside [0,1]")
        terms = x
        if w0 > 0.0:
            e0 = self._expert0(x, f"{block_prefix}.expert0", training)
            terms = add(terms, e0 if w0 == 1.0 else mul(Tensor(np.float64(w0)), e0))
        if w0 < 1.0:
            e1 = self.expert1_forward(x, f"{block_prefix}.expert1.ca")
            terms = add(terms, e1 if w0 == 0.0 else mul(Tensor(np.float64(1.0 - w0)), e1))
        return terms

    def forward_shallow(self, x: Tensor, w0: float, training: bool = False) -> Tensor:
        if x.data.ndim != 4 or x.data.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected [N,{self.config.in_channels},H,W], got {x.data.shape}")
        h, w = x.data.shape[2], x.data.shape[3]
        if h % 4 != 0 or w % 4 != 0:
            raise ShapeError(f"spatial size {h}x{w} not divisible by 4")
        out = conv2d(x, self.params["stem.conv.w"], self.params["stem.conv.b"],
                     stride=2, padding=1)
        out = relu(self._bn_apply(out, "stem.bn", training))
        out = maxpool2d(out, 2)
        for i in range(self.config.blocks_shallow):
            out = self.moe_block_forward(out, f"shallow{i}", w0, training)
        return out

    def _res_block(self, x: Tensor, prefix: str, training: bool) -> Tensor:
        h = conv2d(x, self.params[f"{prefix}.conv1.w"], self.params[f"{prefix}.conv1.b"],
                   stride=1, padding=1)
        h = relu(self._bn_apply(h, f"{prefix}.bn1", training))
        h = conv2d(h, self.params[f"{prefix}.conv2.w"], self.params[f"{prefix}.conv2.b"],
                   stride=1, padding=1)
        h = self._bn_apply(h, f"{prefix}.bn2", training)
        return relu(add(x, h))

    def forward_deep(self, shallow: Tensor, training: bool = False) -> Tensor:
        if shallow.data.ndim != 4 or shallow.data.shape[1] != self.config.shallow_channels:
            raise ShapeError(f"expected shallow [N,{self.config.shallow_channels},h,w], "
                             f"got {shallow.data.shape}")
        if shallow.data.shape[2] % 4 != 0 or shallow.data.shape[3] % 4 != 0:
            raise ShapeError(f"shallow spatial {shallow.data.shape[2:]} not divisible by 4")
        out = shallow
        for i in range(self.config.blocks_deep):
            p = f"deep{i}"
            out = conv2d(out, self.params[f"{p}.down.conv.w"], self.params[f"{p}.down.conv.b"],
                         stride=2, padding=1)
            out = relu(self._bn_apply(out, f"{p}.down.bn", training))
            out = self._res_block(out, f"{p}.res", training)
        return out

    def classifier_logits(self, deep: Tensor, training: bool = False) -> Tensor:
        n, c = deep.data.shape[0], deep.data.shape[1]
        emb = reshape(global_avg_pool(deep), (n, c))
        return dense(emb, self.params["classifier.w"], self.params["classifier.b"])

    def extract_global_embedding(self, x: Tensor, training: bool = False) -> Tensor:
        shallow = self.forward_shallow(x, w0=1.0, training=training)
        deep = self.forward_deep(shallow, training=training)
        n, c = deep.data.shape[0], deep.data.shape[1]
        return reshape(global_avg_pool(deep), (n, c))

    def global_hash_forward(self, x: Tensor, training: bool = False) -> tuple[Tensor, Tensor]:
        """Image batch -> (continuous codes [N, bits], deep map for the
        classifier). The embedding is batch-normalized so it lands on the
        spline grid."""
        shallow = self.forward_shallow(x, w0=1.0, training=training)
        deep = self.forward_deep(shallow, training=training)
        n, c = deep.data.shape[0], deep.data.shape[1]
        emb = reshape(global_avg_pool(deep), (n, c))
        normed = self._bn_apply(emb, "kan_global.bn", training)
        return kan_forward(normed, self.kan_global), deep

    def extract_local_feature_map(self, x: Tensor, alpha: float = 0.0,
                                  training: bool = False) -> Tensor:
        return self.forward_shallow(x, w0=alpha, training=training)

    @property
    def _last_ca(self) -> str:
        return f"shallow{self.config.blocks_shallow - 1}.expert1.ca"

    def pool_window(self, fmap: Tensor, window: FeatureBox) -> Tensor:
        """Average + max pool over a feature-map window, summed, then the
        last shallow block's channel attention. Window over the full map
        reproduces that block's Expert 1 output."""
        if fmap.data.ndim != 4 or fmap.data.shape[0] != 1:
            raise ShapeError(f"pool_window wants [1,C,h,w], got {fmap.data.shape}")
        _, c, h, w = fmap.data.shape
        if not (0 <= window.fy1 < window.fy2 <= h and 0 <= window.fx1 < window.fx2 <= w):
            raise ValueError(f"window {window} outside feature map {h}x{w}")
        win = slice_spatial(fmap, window.fy1, window.fy2, window.fx1, window.fx2)
        pooled = add(global_avg_pool(win), global_max_pool(win))
        gated = self.ca_forward(reshape(pooled, (1, c)), self._last_ca)
        return reshape(gated, (c,))

    def local_hash_forward(self, pooled: Tensor, training: bool = False) -> Tensor:
        """Window-pooled, attention-gated vectors [N, C] -> continuous codes."""
        normed = self._bn_apply(pooled, "kan_local.bn", training)
        return kan_forward(normed, self.kan_local)

    # -- inference helpers -------------------------------------------------

    def encode_global(self, images: np.ndarray) -> np.ndarray:
        """[N,1,H,W] pixels -> [N, bits] signs, inference mode."""
        with no_grad():
            cont, _ = self.global_hash_forward(Tensor(images), training=False)
        return sign_with_tie(cont.data)

    def compute_local_fmap(self, image: np.ndarray, alpha: float = 0.0) -> np.ndarray:
        """Single image [1,H,W] or [1,1,H,W] -> feature map [C,h,w]."""
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        with no_grad():
            fmap = self.extract_local_feature_map(Tensor(arr), alpha=alpha, training=False)
        return fmap.data[0]

    def window_encoder(self):
        """Callback for sliding-window search: feature map + origins ->
        packed local codes, one row per origin, all through the local head."""
        def encode_windows(fmap: np.ndarray, origins: list[tuple[int, int]],
                           window_hw: tuple[int, int]) -> np.ndarray:
            wh, ww = window_hw
            rows = []
            with no_grad():
                t = Tensor(fmap[None])
                for (oi, oj) in origins:
                    box = FeatureBox(fx1=oj, fy1=oi, fx2=oj + ww, fy2=oi + wh)
                    rows.append(self.pool_window(t, box).data)
                pooled = Tensor(np.stack(rows))
                cont = self.local_hash_forward(pooled, training=False)
            return pack_signs(sign_with_tie(cont.data), self.bits)
        return encode_windows

    def encode_local_window(self, image: np.ndarray, bbox: BoundingBox,
                            alpha: float = 0.0) -> tuple[np.ndarray, FeatureBox]:
        """Query-side local code: map the pixel box to feature space, pool
        that one window, hash, pack. Returns (packed words, feature box)."""
        fmap = self.compute_local_fmap(image, alpha=alpha)
        bbox.validate_within(fmap.shape[2] * 4, fmap.shape[1] * 4)
        fbox = map_box_to_feature(bbox)
        fh, fw = fmap.shape[1], fmap.shape[2]
        fbox = FeatureBox(fx1=fbox.fx1, fy1=fbox.fy1,
                          fx2=min(fbox.fx2, fw), fy2=min(fbox.fy2, fh))
        words = self.window_encoder()(fmap, [(fbox.fy1, fbox.fx1)],
                                      (fbox.height, fbox.width))
        return words[0], fbox

    # -- parameter bookkeeping --------------------------------------------

    def state_names(self) -> list[str]:
        names = sorted(self.params)
        for prefix in sorted(self.buffers):
            names.extend([f"{prefix}.running_mean", f"{prefix}.running_var"])
        return names

    def get_state(self) -> dict[str, np.ndarray]:
        state = {k: v.data.copy() for k, v in self.params.items()}
        for prefix, run in self.buffers.items():
            state[f"{prefix}.running_mean"] = run["mean"].copy()
            state[f"{prefix}.running_var"] = run["var"].copy()
        return state

    def set_state(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state_names())
        got = set(state)
        if expected != got:
            missing = sorted(expected - got)[:3]
            extra = sorted(got - expected)[:3]
            raise ValueError(f"state name mismatch; missing={missing} extra={extra}")
        for name, arr in state.items():
            if name.endswith(".running_mean"):
                self.buffers[name[:-len(".running_mean")]]["mean"] = np.asarray(arr, dtype=np.float64).copy()
            elif name.endswith(".running_var"):
                self.buffers[name[:-len(".running_var")]]["var"] = np.asarray(arr, dtype=np.float64).copy()
            else:
                p = self.params[name]
                if p.data.shape != np.asarray(arr).shape:
                    raise ShapeError(f"{name}: shape {np.asarray(arr).shape} != {p.data.shape}")
                p.data = np.asarray(arr, dtype=np.float64).copy()

    def stage2_trainable(self) -> set[str]:
        """Names updated in the second training stage: Expert 1 everywhere
        plus the local hash head."""
        return {n for n in self.params if ".expert1." in n or n.startswith("kan_local.")}


def save_checkpoint(path, model: Model) -> None:
    """Key-value archive of fp32 tensors with the config as JSON metadata."""
    state = model.get_state()
    meta = json.dumps({"config": model.config.to_dict(), "bits": model.bits,
                       "seed": model.seed}).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        f.write(struct.pack("<I", len(state)))
        for name in sorted(state):
            arr = state[name].astype("<f4")
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (meta_len,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(meta_len).decode())
        (count,) = struct.unpack("<I", f.read(4))
        state: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode()
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
            n_items = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(f.read(4 * n_items), dtype="<f4").reshape(shape)
            state[name] = arr.astype(np.float64)
    model = Model(BackboneConfig(**meta["config"]), bits=meta["bits"],
                  seed=meta.get("seed", 0))
    model.set_state(state)
    return model
