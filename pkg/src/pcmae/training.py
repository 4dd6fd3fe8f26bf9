"""Training protocols: augmentation, the pretraining loop, global/local
fine-tuning with linear or nonlinear heads, evaluation, and few-shot episode
sampling.

All loops draw every random decision (shuffles, augmentations, mask seeds,
dropout) from one seeded generator in a fixed order, so a given seed
reproduces loss curves and checkpoints bit-for-bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import FinetuneProtocol, ModelConfig, TrainConfig
from .geometry import PointCloud
from .layers import cross_entropy, dropout, init_layer_norm, init_mlp, layer_norm, mlp_apply
from .optim import AdamWState, DivergenceError, adamw_step, cosine_lr
from .pipeline import (BACKBONE_PREFIXES, extract_global_feature,
                       extract_global_feature_t, pretrain_forward)
from .tensor import ParamStore, Tensor

LabeledItem = tuple[PointCloud, int]


def augment(cloud: PointCloud, seed) -> PointCloud:
    """Random isotropic scale in [2/3, 3/2] plus per-axis translation in
    [-0.2, 0.2]; normals are direction-preserving under both and carried over."""
    rng = np.random.default_rng(seed)
    scale = rng.uniform(2.0 / 3.0, 3.0 / 2.0)
    shift = rng.uniform(-0.2, 0.2, size=3)
    return PointCloud(cloud.points * scale + shift, cloud.normals)


def _check_finite(value: float) -> float:
    if not np.isfinite(value):
        raise DivergenceError("divergence")
    return value


def pretrain_loop(clouds: list[PointCloud], train_cfg: TrainConfig,
                  model_cfg: ModelConfig, store: ParamStore | None = None,
                  out_dir=None, log=None) -> tuple[ParamStore, list[tuple[int, float]]]:
    """Masked-reconstruction pretraining over a list of clouds.

    Returns the trained store and the per-epoch mean loss curve. When
    ``out_dir`` is given, checkpoints are written at the configured epochs
    (plus the final epoch) and the loss curve as ``loss_curve.csv``; a
    divergent step aborts with the last epoch's checkpoint on disk.
    """
    from . import dataio

    if not clouds:
        raise ValueError("empty dataset")
    from .pipeline import init_pretrain_params

    if store is None:
        store = init_pretrain_params(model_cfg, seed=train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    state = AdamWState()
    n = len(clouds)
    steps_per_epoch = (n + train_cfg.batch_size - 1) // train_cfg.batch_size
    total_steps = steps_per_epoch * train_cfg.epochs
    curve: list[tuple[int, float]] = []
    step = 0
    out_dir_p = None
    if out_dir is not None:
        import pathlib

        out_dir_p = pathlib.Path(out_dir)
        out_dir_p.mkdir(parents=True, exist_ok=True)

    def save(epoch):
        if out_dir_p is not None:
            dataio.save_checkpoint(out_dir_p / f"checkpoint_epoch{epoch:04d}.ckpt",
                                   store, model_cfg, train_cfg)

    last_saved = None
    try:
        for epoch in range(1, train_cfg.epochs + 1):
            perm = rng.permutation(n)
            epoch_losses = []
            for start in range(0, n, train_cfg.batch_size):
                batch = perm[start:start + train_cfg.batch_size]
                store.zero_grads()
                inv = 1.0 / len(batch)
                for idx in batch:
                    aug_seed = int(rng.integers(2**63))
                    fwd_seed = int(rng.integers(2**63))
                    cloud = clouds[int(idx)]
                    if train_cfg.augment:
                        cloud = augment(cloud, aug_seed)
                    out = pretrain_forward(cloud, model_cfg, store, fwd_seed)
                    epoch_losses.append(_check_finite(float(out.loss.data)))
                    (out.loss * inv).backward()
                lr = cosine_lr(step, total_steps, train_cfg)
                grads = {name: store[name].grad for name in store.trainable_names()
                         if store[name].grad is not None}
                adamw_step(store, grads, state, lr, train_cfg)
                step += 1
            mean_loss = float(np.mean(epoch_losses))
            curve.append((epoch, mean_loss))
            if log is not None:
                log(f"epoch {epoch}: loss {mean_loss:.6f}")
            if epoch in train_cfg.checkpoint_epochs or epoch == train_cfg.epochs:
                save(epoch)
                last_saved = epoch
    except DivergenceError:
        if out_dir_p is not None and last_saved is None:
            save(0)
        raise
    finally:
        if out_dir_p is not None:
            dataio.write_csv(out_dir_p / "loss_curve.csv", ("epoch", "loss"),
                             [(e, f"{v:.9g}") for e, v in curve])
    return store, curve


# ---------------------------------------------------------------------------
# classification heads
# ---------------------------------------------------------------------------

_NONLINEAR_HIDDEN = 256
_DROPOUT_RATE = 0.5


def init_classifier(store: ParamStore, model_cfg: ModelConfig,
                    protocol: FinetuneProtocol, rng: np.random.Generator,
                    dtype=np.float32) -> None:
    f = model_cfg.feature_dim
    c = protocol.num_classes
    if protocol.head == "linear":
        init_mlp(store, "cls", (f, c), rng, dtype)
    else:
        init_mlp(store, "cls", (f, _NONLINEAR_HIDDEN, _NONLINEAR_HIDDEN, c), rng, dtype)
        init_layer_norm(store, "cls.ln0", _NONLINEAR_HIDDEN, dtype)
        init_layer_norm(store, "cls.ln1", _NONLINEAR_HIDDEN, dtype)


def classifier_forward(features: Tensor, store: ParamStore,
                       protocol: FinetuneProtocol, training: bool = False,
                       rng: np.random.Generator | None = None) -> Tensor:
    """Logits [B, C] from pooled features [B, 2d]."""
    from .layers import affine

    if protocol.head == "linear":
        return mlp_apply(features, store, "cls",
                         (features.shape[-1], protocol.num_classes))
    # nonlinear: affine -> LN -> ReLU -> dropout, twice, then affine to C
    x = affine(features, store, "cls.l0")
    x = layer_norm(x, store, "cls.ln0")
    x = T.relu(x)
    x = dropout(x, _DROPOUT_RATE, rng, training)
    x = affine(x, store, "cls.l1")
    x = layer_norm(x, store, "cls.ln1")
    x = T.relu(x)
    x = dropout(x, _DROPOUT_RATE, rng, training)
    return affine(x, store, "cls.l2")


def _features_matrix(items: list[LabeledItem], model_cfg: ModelConfig,
                     store: ParamStore, cache: dict | None) -> np.ndarray:
    rows = []
    for cloud, _ in items:
        key = id(cloud)
        if cache is not None and key in cache:
            rows.append(cache[key])
            continue
        feat = extract_global_feature(cloud, model_cfg, store).astype(np.float32)
        if cache is not None:
            cache[key] = feat
        rows.append(feat)
    return np.stack(rows)


def finetune(backbone: ParamStore, train_items: list[LabeledItem],
             protocol: FinetuneProtocol, train_cfg: TrainConfig,
             model_cfg: ModelConfig, feature_cache: dict | None = None,
             log=None) -> tuple[ParamStore, list[tuple[int, float]]]:
    """Train a classification head on pooled global features.

    ``scope=local`` freezes every backbone tensor (verified bit-identical by
    the tests); ``scope=global`` lets gradients flow through the whole model.
    Returns a new store containing backbone + head and the loss history.
    """
    if not train_items:
        raise ValueError("empty dataset")
    labels_all = np.array([label for _, label in train_items], dtype=np.int64)
    if labels_all.max() >= protocol.num_classes or labels_all.min() < 0:
        raise ValueError("label outside the configured class count")

    store = copy_store(backbone)
    rng = np.random.default_rng(train_cfg.seed)
    init_classifier(store, model_cfg, protocol, rng)
    local = protocol.scope == "local"
    if local:
        for prefix in BACKBONE_PREFIXES:
            store.freeze_prefix(prefix)
        feats_const = _features_matrix(train_items, model_cfg, store, feature_cache)

    state = AdamWState()
    n = len(train_items)
    steps_per_epoch = (n + train_cfg.batch_size - 1) // train_cfg.batch_size
    total_steps = steps_per_epoch * train_cfg.epochs
    history: list[tuple[int, float]] = []
    step = 0
    for epoch in range(1, train_cfg.epochs + 1):
        perm = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, train_cfg.batch_size):
            batch = perm[start:start + train_cfg.batch_size]
            store.zero_grads()
            if local:
                feats = Tensor(feats_const[batch])
            else:
                cols = []
                for idx in batch:
                    cloud, _ = train_items[int(idx)]
                    cols.append(extract_global_feature_t(cloud, model_cfg, store).reshape((1, -1)))
                feats = T.concat(cols, axis=0)
            logits = classifier_forward(feats, store, protocol, training=True, rng=rng)
            loss = cross_entropy(logits, labels_all[batch], protocol.num_classes,
                                 train_cfg.label_smoothing)
            epoch_losses.append(_check_finite(float(loss.data)))
            loss.backward()
            grads = {name: store[name].grad for name in store.trainable_names()
                     if store[name].grad is not None}
            adamw_step(store, grads, state, cosine_lr(step, total_steps, train_cfg), train_cfg)
            step += 1
        mean_loss = float(np.mean(epoch_losses))
        history.append((epoch, mean_loss))
        if log is not None:
            log(f"epoch {epoch}: loss {mean_loss:.6f}")
    return store, history


def evaluate_classifier(store: ParamStore, model_cfg: ModelConfig,
                        protocol: FinetuneProtocol, items: list[LabeledItem],
                        feature_cache: dict | None = None) -> float:
    """Exact-match accuracy of argmax predictions."""
    if not items:
        raise ValueError("empty dataset")
    feats = Tensor(_features_matrix(items, model_cfg, store, feature_cache))
    logits = classifier_forward(feats, store, protocol, training=False)
    pred = np.argmax(logits.data, axis=1)
    labels = np.array([label for _, label in items], dtype=np.int64)
    return float((pred == labels).mean())


def copy_store(store: ParamStore) -> ParamStore:
    out = ParamStore()
    for name, t in store.items():
        out.add(name, t.data.copy(), trainable=t.requires_grad)
    return out


# ---------------------------------------------------------------------------
# few-shot protocol
# ---------------------------------------------------------------------------

@dataclass
class FewShotEpisode:
    """One n-way m-shot split; labels are remapped to 0..n-1 in episode order."""

    train: list[LabeledItem]
    test: list[LabeledItem]
    classes: list[int]          # original class ids, indexed by episode label


def few_shot_episode(items: list[LabeledItem], n_way: int, m_shot: int,
                     test_per_class: int = 20, seed=0) -> FewShotEpisode:
    """Sample n classes without replacement, then m train + ``test_per_class``
    test objects per class, disjoint; deterministic per seed."""
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, (_, label) in enumerate(items):
        by_class.setdefault(int(label), []).append(i)
    eligible = sorted(c for c, idxs in by_class.items()
                      if len(idxs) >= m_shot + test_per_class)
    if len(eligible) < n_way:
        raise ValueError("insufficient samples per class")
    chosen = rng.choice(np.array(eligible), size=n_way, replace=False)
    train: list[LabeledItem] = []
    test: list[LabeledItem] = []
    for episode_label, cls in enumerate(int(c) for c in chosen):
        order = rng.permutation(by_class[cls])
        for i in order[:m_shot]:
            train.append((items[int(i)][0], episode_label))
        for i in order[m_shot:m_shot + test_per_class]:
            test.append((items[int(i)][0], episode_label))
    return FewShotEpisode(train, test, [int(c) for c in chosen])


def run_few_shot(backbone: ParamStore, items: list[LabeledItem], n_way: int,
                 m_shot: int, train_cfg: TrainConfig, model_cfg: ModelConfig,
                 protocol_head: str = "linear", protocol_scope: str = "local",
                 episodes: int = 10, test_per_class: int = 20,
                 log=None) -> tuple[list[float], float, float]:
    """Mean +- std accuracy over seeded episodes, one fine-tuned head each."""
    accs = []
    # features depend only on the frozen backbone, so a shared cache is only
    # valid for local-scope episodes
    cache: dict | None = {} if protocol_scope == "local" else None
    for ep in range(episodes):
        episode = few_shot_episode(items, n_way, m_shot, test_per_class,
                                   seed=train_cfg.seed + ep)
        protocol = FinetuneProtocol(scope=protocol_scope, head=protocol_head,
                                    num_classes=n_way)
        tuned, _ = finetune(backbone, episode.train, protocol, train_cfg,
                            model_cfg, feature_cache=cache)
        acc = evaluate_classifier(tuned, model_cfg, protocol, episode.test,
                                  feature_cache=cache)
        accs.append(acc)
        if log is not None:
            log(f"episode {ep}: accuracy {acc:.4f}")
    return accs, float(np.mean(accs)), float(np.std(accs))
