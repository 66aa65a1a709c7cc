"""Two-stage training orchestration.

Stage 1 drives the whole-image path (gate pinned to Expert 0) with the
similarity-weighted contrastive loss plus quantization and classification
terms. Between stages, Expert 1 is seeded: any parameter whose Expert 0
counterpart matches in shape is copied bitwise, the rest (the channel
attention, which has no counterpart) gets a fresh seeded draw. Stage 2 then
updates only Expert 1 and the local hash head, teaching the local codes to
survive flips and right-angle rotations; everything else stays bitwise
frozen.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import numpy as np

from . import losses
from .dataset import Entry, load_batch
from .model import Model, _he_dense, tensor_seed
from .numerics import NumericError, Tensor, forward_backward, no_grad, seeded_rng
from .retrieval import compute_map, pack_code_set, pack_signs

STREAM_STAGE1 = 0x51A6E1
STREAM_STAGE2 = 0x51A6E2


class TrainAbort(RuntimeError):
    """Raised when a loss goes non-finite; message carries the coordinates."""


@dataclass
class TrainConfig:
    bits: int = 16
    epochs_per_stage: int = 10
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 0
    lambda_reg: float = 0.1
    alpha: float = 0.0
    val_queries: int = 160
    val_db: int = 480

    def __post_init__(self):
        # lr 0 is allowed as the degenerate no-update run
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs_per_stage < 1:
            raise ValueError("epochs_per_stage must be >= 1")


@dataclass
class AugmentSpec:
    """Exactly one lossless geometric op: right-angle rotation or a flip."""

    op: str            # "rot" | "flip_h" | "flip_v"
    theta: int = 0     # degrees, only for "rot"

    def __post_init__(self):
        if self.op not in ("rot", "flip_h", "flip_v"):
            raise ValueError(f"unknown augment op {self.op!r}")
        if self.op == "rot" and self.theta not in (90, 180, 270):
            raise ValueError(f"rotation angle must be 90/180/270, got {self.theta}")


def sample_augment(rng: np.random.Generator) -> AugmentSpec:
    op = ("rot", "flip_h", "flip_v")[int(rng.integers(3))]
    if op == "rot":
        return AugmentSpec(op="rot", theta=int(rng.integers(1, 4)) * 90)
    return AugmentSpec(op=op)


def apply_augment(image: np.ndarray, spec: AugmentSpec) -> np.ndarray:
    """Exact pixel permutation on the trailing two axes."""
    if spec.op == "rot":
        return np.rot90(image, k=spec.theta // 90, axes=(-2, -1)).copy()
    if spec.op == "flip_h":
        return np.flip(image, axis=-1).copy()
    return np.flip(image, axis=-2).copy()


def cosine_lr(epoch: int, epochs: int, lr0: float) -> float:
    """Cosine anneal from lr0 down to 0.01*lr0 over `epochs` epochs."""
    eta = 0.01 * lr0
    if epochs == 1:
        return lr0
    return eta + 0.5 * (lr0 - eta) * (1.0 + np.cos(np.pi * epoch / (epochs - 1)))


class AdamW:
    """Adaptive moments with decoupled weight decay. Steps only the names it
    was given; everything else in the model is untouched by construction."""

    def __init__(self, params: dict[str, Tensor], trainable: set[str],
                 weight_decay: float = 1e-4, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.params = params
        self.trainable = sorted(trainable)
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(params[n].data) for n in self.trainable}
        self.v = {n: np.zeros_like(params[n].data) for n in self.trainable}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name in self.trainable:
            g = grads[name]
            m = self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            p = self.params[name]
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - lr * update - lr * self.weight_decay * p.data


@dataclass
class TrainData:
    """Fully materialized split: pixels, labels, ids, and the 8x8 thumbnails
    the similarity weights are computed from."""

    images: np.ndarray   # [N,1,H,W] float64
    labels: np.ndarray   # [N] int64
    ids: np.ndarray      # [N] int64
    num_classes: int

    @classmethod
    def from_entries(cls, entries: list[Entry], root, num_classes: int) -> "TrainData":
        entries = sorted(entries, key=lambda e: e.id)
        images = load_batch(entries, root)
        labels = np.array([e.label for e in entries], dtype=np.int64)
        ids = np.array([e.id for e in entries], dtype=np.int64)
        return cls(images=images, labels=labels, ids=ids, num_classes=num_classes)

    def __post_init__(self):
        self.thumbs = np.stack([losses.downsample_8x8(img) for img in self.images])

    @property
    def count(self) -> int:
        return self.images.shape[0]

    def one_hot(self) -> np.ndarray:
        return np.eye(self.num_classes, dtype=np.float64)[self.labels]


def _check_finite(value: float, stage: int, epoch: int, batch: int) -> None:
    if not np.isfinite(value):
        raise TrainAbort(f"non-finite loss {value} at stage {stage} "
                         f"epoch {epoch} batch {batch}")


def metrics_line(epoch: int, stage: int, vals: dict[str, float | None]) -> str:
    cells = [str(epoch), str(stage)]
    for key in ("L_contrast", "L_quant", "L_CE", "L_consist", "L_reg", "val_mAP"):
        v = vals.get(key)
        cells.append("-" if v is None else f"{v:.6f}")
    return "\t".join(cells)


def encode_global_codes(model: Model, images: np.ndarray, chunk: int = 64) -> np.ndarray:
    out = [model.encode_global(images[i:i + chunk])
           for i in range(0, images.shape[0], chunk)]
    return np.concatenate(out, axis=0)


def encode_local_codes(model: Model, images: np.ndarray, alpha: float = 0.0,
                       chunk: int = 64) -> np.ndarray:
    """Full-image local codes (whole-map window), inference mode."""
    from .kanhash import sign_with_tie
    out = []
    with no_grad():
        for i in range(0, images.shape[0], chunk):
            cont = _local_continuous(model, Tensor(images[i:i + chunk]),
                                     alpha=alpha, training=False)
            out.append(sign_with_tie(cont.data))
    return np.concatenate(out, axis=0)


def _local_continuous(model: Model, x: Tensor, alpha: float, training: bool) -> Tensor:
    """Local-path continuous codes for a batch: shallow map at gate alpha,
    whole-map pooling through the last block's channel attention, local
    hash head. Equals pool_window over the full map, batched."""
    from .numerics import add, global_avg_pool, global_max_pool, reshape
    fmap = model.extract_local_feature_map(x, alpha=alpha, training=training)
    n, c = fmap.data.shape[0], fmap.data.shape[1]
    pooled = add(global_avg_pool(fmap), global_max_pool(fmap))
    gated = model.ca_forward(reshape(pooled, (n, c)), model._last_ca)
    return model.local_hash_forward(gated, training=training)


def validation_map(model: Model, val: TrainData, db: TrainData,
                   max_queries: int, max_db: int) -> float:
    qn = min(max_queries, val.count)
    dn = min(max_db, db.count)
    q_codes = encode_global_codes(model, val.images[:qn])
    d_codes = encode_global_codes(model, db.images[:dn])
    pcs = pack_code_set(d_codes, db.ids[:dn], model.bits)
    return compute_map(pack_signs(q_codes, model.bits), val.one_hot()[:qn],
                       pcs, db.one_hot()[:dn])


def stage1_trainable(model: Model) -> set[str]:
    return set(model.params) - model.stage2_trainable()


def stage1_train(model: Model, config: TrainConfig, train: TrainData,
                 val: TrainData | None = None, log=None) -> list[dict]:
    """Whole-image contrastive hashing at the global gate endpoint."""
    rng = seeded_rng(config.seed, STREAM_STAGE1)
    trainable = stage1_trainable(model)
    train_params = {n: model.params[n] for n in trainable}
    opt = AdamW(model.params, trainable, weight_decay=config.weight_decay)
    model.running_update_filter = None
    history = []
    for epoch in range(config.epochs_per_stage):
        lr = cosine_lr(epoch, config.epochs_per_stage, config.lr)
        order = rng.permutation(train.count)
        sums = {"L_contrast": 0.0, "L_quant": 0.0, "L_CE": 0.0, "total": 0.0}
        nb = 0
        for batch_no, start in enumerate(range(0, train.count, config.batch_size)):
            idx = order[start:start + config.batch_size]
            if idx.shape[0] < 2:
                continue
            x = Tensor(train.images[idx])
            labels = train.labels[idx]
            sim = losses.similarity_matrix(train.thumbs[idx])
            try:
                cont, deep = model.global_hash_forward(x, training=True)
                logits = model.classifier_logits(deep, training=True)
                contrast = losses.contrastive_batch(cont, labels, sim)
                quant = losses.quantization_loss(cont)
                ce = losses.cross_entropy(logits, labels)
                total = losses.stage1_total(contrast, quant, ce)
                loss_val, grads = forward_backward(total, train_params)
            except NumericError as exc:
                raise TrainAbort(f"stage 1 epoch {epoch} batch {batch_no}: {exc}")
            _check_finite(loss_val, 1, epoch, batch_no)
            if config.lr > 0:
                opt.step({n: grads[n].data for n in trainable}, lr)
            sums["L_contrast"] += float(contrast.data)
            sums["L_quant"] += float(quant.data)
            sums["L_CE"] += float(ce.data)
            sums["total"] += loss_val
            nb += 1
        record = {k: v / max(nb, 1) for k, v in sums.items()}
        record.update(epoch=epoch, stage=1, lr=lr)
        if val is not None:
            record["val_mAP"] = validation_map(model, val, train,
                                               config.val_queries, config.val_db)
        history.append(record)
        if log is not None:
            log(metrics_line(epoch, 1, {**record, "L_consist": None, "L_reg": None,
                                        "val_mAP": record.get("val_mAP")}))
    return history


def clone_matching(params: dict[str, Tensor], src_tag: str = ".expert0.",
                   dst_tag: str = ".expert1.") -> list[str]:
    """Copy src params onto dst params wherever the mirrored name exists with
    the same shape. Returns the copied destination names."""
    copied = []
    for name in sorted(params):
        if dst_tag not in name:
            continue
        mirror = name.replace(dst_tag, src_tag)
        if mirror in params and params[mirror].data.shape == params[name].data.shape:
            params[name].data = params[mirror].data.copy()
            copied.append(name)
    return copied


def clone_expert0_to_expert1(model: Model) -> list[str]:
    """Seed Expert 1 from Expert 0: shape-matched names copied bitwise, then
    the channel-attention weights (no Expert 0 counterpart) freshly drawn
    from a dedicated seed stream. Biases reset to zero."""
    copied = clone_matching(model.params)
    copied_set = set(copied)
    for name in sorted(model.params):
        if ".expert1." not in name or name in copied_set:
            continue
        p = model.params[name]
        if name.endswith(".b"):
            p.data = np.zeros_like(p.data)
        else:
            rng = seeded_rng(model.seed, zlib.crc32(f"clone.{name}".encode()))
            out_d, in_d = p.data.shape
            p.data = _he_dense(rng, out_d, in_d)
    return copied


def stage2_train(model: Model, config: TrainConfig, train: TrainData,
                 val: TrainData | None = None, log=None) -> list[dict]:
    """Augmentation-consistency specialization of Expert 1 and the local
    head; every other parameter and running stat is left untouched."""
    rng = seeded_rng(config.seed, STREAM_STAGE2)
    trainable = model.stage2_trainable()
    train_params = {n: model.params[n] for n in trainable}
    opt = AdamW(model.params, trainable, weight_decay=config.weight_decay)
    model.running_update_filter = {"kan_local.bn"}
    history = []
    try:
        for epoch in range(config.epochs_per_stage):
            lr = cosine_lr(epoch, config.epochs_per_stage, config.lr)
            order = rng.permutation(train.count)
            sums = {"L_consist": 0.0, "L_reg": 0.0, "total": 0.0}
            nb = 0
            for batch_no, start in enumerate(range(0, train.count, config.batch_size)):
                idx = order[start:start + config.batch_size]
                if idx.shape[0] < 2:
                    continue
                originals = train.images[idx]
                transformed = np.stack([apply_augment(img, sample_augment(rng))
                                        for img in originals])
                try:
                    h_orig = _local_continuous(model, Tensor(originals),
                                               alpha=config.alpha, training=True)
                    h_trans = _local_continuous(model, Tensor(transformed),
                                                alpha=config.alpha, training=True)
                    consist = losses.consistency_loss(h_orig, h_trans)
                    reg = losses.diversity_regularizer(h_orig)
                    total = losses.stage2_total(consist, reg, config.lambda_reg)
                    loss_val, grads = forward_backward(total, train_params)
                except NumericError as exc:
                    raise TrainAbort(f"stage 2 epoch {epoch} batch {batch_no}: {exc}")
                _check_finite(loss_val, 2, epoch, batch_no)
                if config.lr > 0:
                    opt.step({n: grads[n].data for n in trainable}, lr)
                sums["L_consist"] += float(consist.data)
                sums["L_reg"] += float(reg.data)
                sums["total"] += loss_val
                nb += 1
            record = {k: v / max(nb, 1) for k, v in sums.items()}
            record.update(epoch=epoch, stage=2, lr=lr)
            history.append(record)
            if log is not None:
                log(metrics_line(epoch, 2, {**record, "L_contrast": None,
                                            "L_quant": None, "L_CE": None,
                                            "val_mAP": None}))
    finally:
        model.running_update_filter = None
    return history


def train_all(model: Model, config: TrainConfig, train: TrainData,
              val: TrainData | None = None, log=None) -> dict:
    """Stage 1, expert cloning, stage 2."""
    h1 = stage1_train(model, config, train, val, log)
    cloned = clone_expert0_to_expert1(model)
    h2 = stage2_train(model, config, train, val, log)
    return {"stage1": h1, "stage2": h2, "cloned": cloned}


def progressive_bit_run(bit_list: list[int], config: TrainConfig, train: TrainData,
                        val: TrainData | None = None, config_cls=None,
                        log=None) -> dict[int, Model]:
    """One model per code length, ascending; each backbone warm-starts from
    the previous length's trained backbone, hash heads start fresh."""
    from .model import BackboneConfig
    if not bit_list:
        raise ValueError("bit_list must not be empty")
    if sorted(bit_list) != list(bit_list):
        raise ValueError(f"bit_list must be ascending, got {bit_list}")
    out: dict[int, Model] = {}
    prev: Model | None = None
    for bits in bit_list:
        cfg = replace(config, bits=bits)
        model = Model(BackboneConfig(num_classes=train.num_classes), bits=bits,
                      seed=config.seed)
        if prev is not None:
            prev_state = prev.get_state()
            head = lambda n: n.startswith("kan_global.") or n.startswith("kan_local.")
            state = model.get_state()
            for name in state:
                if not head(name):
                    state[name] = prev_state[name]
            model.set_state(state)
        train_all(model, cfg, train, val, log)
        out[bits] = model
        prev = model
    return out
