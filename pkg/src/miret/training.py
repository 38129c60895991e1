"""Streaming trainer: batches -> loss -> Adam, with exact-resume checkpoints.

Training metrics stream to a newline-delimited JSON file (one record per
step: step number, loss, in-batch accuracy).  Checkpoints carry the model
parameters, optimizer slots, frequency-estimator state and stream
position, so resuming reproduces the uninterrupted run bit-for-bit.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import loss as L
from . import tensor as T
from .checkpoint import load_arrays, save_arrays
from .data import Example, TrainingBatch, batch_stream
from .errors import NumericError
from .model import MultiInterestModel
from .optim import Adam
from .tensor import Tensor


@dataclass(frozen=True)
class TrainSettings:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    steps: int = 3000
    checkpoint_every: int = 1000
    logq_decay: float = 0.9999
    logq_floor: float = 1e-6
    item_lr: float | None = None  # per-table override for the item embeddings


class Trainer:
    def __init__(
        self,
        model: MultiInterestModel,
        examples: list[Example],
        settings: TrainSettings,
        out_dir: str,
        seed: int = 0,
        config_hash: str = "",
    ):
        self.model = model
        self.examples = examples
        self.settings = settings
        self.out_dir = out_dir
        self.seed = seed
        self.config_hash = config_hash
        overrides = {"embed.item": settings.item_lr} if settings.item_lr is not None else None
        self.optimizer = Adam(
            model.parameters(),
            lr=settings.lr,
            betas=(settings.beta1, settings.beta2),
            eps=settings.adam_eps,
            lr_overrides=overrides,
        )
        self.estimator = L.FrequencyEstimator(decay=settings.logq_decay, floor=settings.logq_floor)
        # seed Q with the dataset's positive frequencies so corrections are
        # stable from step one instead of warming up from empty counts
        self.estimator.observe([ex.held_out for ex in examples])
        self.step = 0
        self._stream = batch_stream(examples, settings.batch_size, seed)
        os.makedirs(out_dir, exist_ok=True)

    # ------------------------------------------------------------------

    def batch_interests(self, batch: TrainingBatch) -> Tensor:
        """Forward the batch, grouping equal-length histories for batched math."""
        by_len: dict[int, list[int]] = {}
        for i, ex in enumerate(batch.examples):
            by_len.setdefault(ex.length, []).append(i)
        chunks = []
        order: list[int] = []
        for length, members in sorted(by_len.items()):
            cols = {
                key: np.concatenate([batch.examples[i].columns()[key] for i in members])
                for key in ("items", "watch", "dur", "tags", "labels")
            }
            chunks.append(self.model.interests_from_columns(cols, len(members), length))
            order.extend(members)
        stacked = chunks[0] if len(chunks) == 1 else T.concat(chunks, axis=0)
        inverse = np.empty(len(order), dtype=np.int64)
        inverse[np.asarray(order)] = np.arange(len(order))
        return T.gather_rows(stacked, inverse)

    def compute_loss(self, batch: TrainingBatch) -> tuple[Tensor, float]:
        interests = self.batch_interests(batch)
        positives = batch.positives
        item_embs = T.gather_rows(self.model.encoder.item_table.weights, positives)
        logits = L.in_batch_logits(interests, item_embs)
        allowed = L.duplicate_mask(positives)
        self.estimator.observe(positives)
        q = self.estimator.estimates(positives)
        corrected = L.logq_correct(logits, q)
        loss, _ = L.smoothed_loss(corrected, self.model.cfg.smoothing_alpha, allowed)
        accuracy = L.in_batch_accuracy(corrected.data, allowed)
        return loss, accuracy

    def train_step(self) -> dict:
        batch = next(self._stream)
        self.step += 1
        loss, accuracy = self.compute_loss(batch)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            norms = {name: float(np.linalg.norm(p.data)) for name, p in self.model.parameters()}
            raise NumericError(
                f"non-finite loss at step {self.step} (batch index {self.step - 1}); "
                f"parameter norms: {json.dumps(norms)}"
            )
        loss.backward()
        self.optimizer.step()
        self.optimizer.zero_grad()
        return {"step": self.step, "loss": loss_value, "accuracy": accuracy}

    def run(self, steps: int | None = None, metrics_path: str | None = None, log_every: int = 0) -> list[dict]:
        total = steps if steps is not None else self.settings.steps
        metrics_path = metrics_path or os.path.join(self.out_dir, "metrics.ndjson")
        records = []
        mode = "a" if self.step > 0 else "w"
        with open(metrics_path, mode) as mf:
            while self.step < total:
                rec = self.train_step()
                records.append(rec)
                mf.write(json.dumps(rec) + "\n")
                if self.settings.checkpoint_every and self.step % self.settings.checkpoint_every == 0:
                    self.save_checkpoint(self._ckpt_prefix(self.step))
                if log_every and rec["step"] % log_every == 0:
                    print(f"step {rec['step']}: loss={rec['loss']:.4f} acc={rec['accuracy']:.4f}", flush=True)
        self.save_checkpoint(self._ckpt_prefix(None))
        return records

    # ------------------------------------------------------------------
    # checkpointing

    def _ckpt_prefix(self, step: int | None) -> str:
        name = "checkpoint-final" if step is None else f"checkpoint-{step:06d}"
        return os.path.join(self.out_dir, name)

    def save_checkpoint(self, prefix: str) -> str:
        arrays = dict(self.model.state_arrays())
        arrays.update(self.optimizer.state_arrays())
        extra = {
            "step": self.step,
            "adam_t": self.optimizer.t,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "estimator": self.estimator.state(),
        }
        save_arrays(prefix, arrays, extra)
        return prefix

    def load_checkpoint(self, prefix: str) -> None:
        arrays, extra = load_arrays(prefix)
        self.model.load_state_arrays(arrays)
        self.optimizer.load_state_arrays(arrays, t=extra["adam_t"])
        self.estimator = L.FrequencyEstimator.from_state(extra["estimator"])
        self.step = extra["step"]
        self._stream = batch_stream(self.examples, self.settings.batch_size, self.seed)
        for _ in range(self.step):
            next(self._stream)


def read_metrics(path: str) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
