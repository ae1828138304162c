"""Training/evaluation harness over synthetic phantoms.

Fully deterministic per config: phantom data derives from data.seed, model
init and batch order from train.seed, and every numeric path is
deterministic, so two runs with the same config produce byte-identical
checkpoints.  A non-finite loss aborts training, retaining the last
end-of-epoch state as ``ckpt_last_good.vck``.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .errors import NumericError
from .losses import GroundTruthSet, LossWeights, semantic_coupled_loss, total_loss
from .metrics import foreground_dice
from .model import SegmentationModel, build_model
from .optim import Schedule, SgdOptimizer, poly_base
from .phantom import PhantomSpec, gen_phantom
from .tensor import Tensor

VAL_SEED_OFFSET = 100_000


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    epochs_run: int
    final_dice: dict[int, float] = field(default_factory=dict)
    mean_dice: float = 0.0
    wall_seconds: float = 0.0


def phantom_set(cfg, count: int, seed_offset: int) -> list[tuple[np.ndarray, np.ndarray]]:
    spec = PhantomSpec.from_config(cfg)
    base = cfg["data.seed"]
    return [gen_phantom(spec, base + seed_offset + i) for i in range(count)]


def loss_weights(cfg) -> LossWeights:
    return LossWeights(lambda_class=cfg["loss.lambda_class"],
                       lambda_bce=cfg["loss.lambda_bce"],
                       lambda_dice=cfg["loss.lambda_dice"],
                       no_object_weight=cfg["loss.no_object_weight"])


def sample_loss(model: SegmentationModel, forward_out, labels: np.ndarray,
                weights: LossWeights):
    """Loss tensor + breakdown dict for one sample's forward output."""
    k = model.num_classes
    if model.variant == "decoupled":
        gt = GroundTruthSet.from_label_volume(labels, k)
        loss, br = total_loss(forward_out.stages_fine_first(), gt, weights)
        return loss, br.as_dict()
    onehot = np.stack([(labels == c).astype(np.float32) for c in range(k + 1)])
    loss, br = semantic_coupled_loss(forward_out.coupled.semantic_probs, onehot)
    return loss, br.as_dict()


def evaluate(model: SegmentationModel, volumes) -> dict[int, float]:
    """Mean per-class foreground dice over (intensity, labels) pairs."""
    k = model.num_classes
    totals = {c: 0.0 for c in range(1, k + 1)}
    for intensity, labels in volumes:
        pred = model.infer_labels(intensity)
        scores = foreground_dice(pred, labels.astype(np.int64), k)
        for c, s in scores.items():
            totals[c] += s
    n = max(len(volumes), 1)
    return {c: v / n for c, v in totals.items()}


def _metrics_header(k: int) -> list[str]:
    return (["epoch", "loss_total", "loss_class", "loss_bce", "loss_dice",
             "lr_cnn", "lr_trans"]
            + [f"dice_{c}" for c in range(1, k + 1)] + ["dice_mean"])


def train(cfg, out_dir, log=None) -> TrainResult:
    t_start = time.time()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    say = log or (lambda msg: None)

    model = build_model(cfg)
    optimizer = SgdOptimizer(list(model.named_parameters()),
                             momentum=cfg["optim.momentum"],
                             weight_decay=cfg["optim.weight_decay"],
                             nesterov=cfg["optim.nesterov"],
                             lambda_cnn=cfg["optim.lambda_cnn"],
                             lambda_trans=cfg["optim.lambda_trans"])
    schedule = Schedule(init_lr=cfg["optim.init_lr"],
                        max_epoch=cfg["optim.max_epoch"])
    weights = loss_weights(cfg)

    train_set = phantom_set(cfg, cfg["data.num_train"], 0)
    val_set = phantom_set(cfg, cfg["data.num_val"], VAL_SEED_OFFSET)
    k = model.num_classes

    loop_rng = np.random.default_rng([cfg["train.seed"], 555_001])
    batch = cfg["train.batch_size"]
    iters = cfg["train.iters_per_epoch"]
    epochs = cfg["optim.max_epoch"]
    eval_every = max(cfg["train.eval_every"], 1)
    save_every = cfg["train.save_every"]

    metrics_path = out_dir / "metrics.csv"
    ckpt_path = out_dir / "ckpt_final.vck"
    last_good: dict | None = None
    final_scores: dict[int, float] = {}

    def write_ckpt(path, epoch, state=None):
        state = state or {"params": model.param_arrays(),
                          "velocity": optimizer.state_arrays(),
                          "rng": loop_rng.bit_generator.state}
        save_checkpoint(path, state["params"], state["velocity"], epoch,
                        cfg.canonical_text(), cfg.config_hash(), state["rng"])

    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_metrics_header(k))
        for epoch in range(epochs):
            base_lr = poly_base(epoch, schedule)
            sums = {"loss_total": 0.0, "loss_class": 0.0,
                    "loss_bce": 0.0, "loss_dice": 0.0}
            for _ in range(iters):
                idx = loop_rng.integers(0, len(train_set), size=batch)
                volume = np.stack([train_set[i][0] for i in idx])
                optimizer.zero_grads()
                outs = model.forward(Tensor(volume))
                loss = None
                terms: dict[str, float] = {}
                for b, i in enumerate(idx):
                    l_b, br = sample_loss(model, outs[b], train_set[i][1], weights)
                    l_b = T.scale(l_b, 1.0 / batch)
                    loss = l_b if loss is None else T.add(loss, l_b)
                    for key, v in br.items():
                        terms[key] = terms.get(key, 0.0) + v / batch
                if not np.isfinite(loss.item()):
                    if last_good is not None:
                        write_ckpt(out_dir / "ckpt_last_good.vck",
                                   last_good["epoch"], last_good)
                    raise NumericError(
                        f"non-finite loss at epoch {epoch}; last good state "
                        f"{'saved' if last_good else 'unavailable'}")
                loss.backward()
                optimizer.step(base_lr)
                for key in sums:
                    sums[key] += terms.get(key, 0.0) / iters

            row = [epoch, f"{sums['loss_total']:.6f}", f"{sums['loss_class']:.6f}",
                   f"{sums['loss_bce']:.6f}", f"{sums['loss_dice']:.6f}",
                   f"{cfg['optim.lambda_cnn'] * base_lr:.8f}",
                   f"{cfg['optim.lambda_trans'] * base_lr:.8f}"]
            if (epoch + 1) % eval_every == 0 or epoch == epochs - 1:
                scores = evaluate(model, val_set)
                final_scores = scores
                mean = float(np.mean(list(scores.values())))
                row += [f"{scores[c]:.4f}" for c in range(1, k + 1)] + [f"{mean:.4f}"]
                say(f"epoch {epoch + 1}/{epochs} loss {sums['loss_total']:.4f} "
                    f"dice {mean:.4f}")
            else:
                row += [""] * (k + 1)
                say(f"epoch {epoch + 1}/{epochs} loss {sums['loss_total']:.4f}")
            writer.writerow(row)
            fh.flush()

            last_good = {"params": model.param_arrays(),
                         "velocity": optimizer.state_arrays(),
                         "rng": loop_rng.bit_generator.state, "epoch": epoch}
            if save_every and (epoch + 1) % save_every == 0:
                write_ckpt(out_dir / f"ckpt_epoch{epoch + 1:04d}.vck", epoch)

    write_ckpt(ckpt_path, epochs - 1)
    mean = float(np.mean(list(final_scores.values()))) if final_scores else 0.0
    return TrainResult(checkpoint_path=ckpt_path, metrics_path=metrics_path,
                       epochs_run=epochs, final_dice=final_scores, mean_dice=mean,
                       wall_seconds=time.time() - t_start)
