"""Runtime state of one learning agent."""
from __future__ import annotations

import logging
import math
from typing import Sequence

import numpy as np

from .codec import Checkpoint
from .data import AgentDataset, ChannelStats
from .errors import UsageError
from .metrics import MetricsRecord, confusion_matrix, macro_f1, per_class_f1
from .nn import (AdamState, ModelArchitecture, SensorWindow, adam_step, check_params,
                 cross_entropy, forward_batch, init_params, loss_and_grad_arrays,
                 stack_windows)

log = logging.getLogger(__name__)

EVAL_CHUNK = 512


class Agent:
    """An agent's model, optimizer, private data and batch iterator.

    Training windows are standardized with statistics of the agent's own
    training set; the same transform is applied to anything it evaluates.
    An agent without training windows is *passive*: it never trains, and
    its parameters only change through :meth:`set_params`.

    Args:
        agent_id: identifier, also the aggregation order key.
        arch: model architecture shared by the whole network.
        dataset: the agent's private windows.
        init_seed: seed for :func:`init_params`.
        shuffle_seed: batch order of epoch ``e`` is drawn from ``(shuffle_seed, e)``.
        adam: Adam hyperparameters (``alpha``, ``beta1``, ``beta2``, ``epsilon``).
        standardize: apply per-channel standardization.
        reset_optimizer_on_set: zero the Adam moments whenever parameters are replaced.
    """

    def __init__(self, agent_id: int, arch: ModelArchitecture, dataset: AgentDataset, *,
                 init_seed: int = 0, shuffle_seed: int = 0, adam: dict | None = None,
                 standardize: bool = True, reset_optimizer_on_set: bool = False,
                 params: np.ndarray | None = None):
        self.agent_id = agent_id
        self.arch = arch
        self.dataset = dataset
        self.rng_seed = shuffle_seed
        self.reset_optimizer_on_set = reset_optimizer_on_set
        self._params = (init_params(arch, init_seed) if params is None
                        else np.array(check_params(params, arch), dtype=np.float64))
        self.adam = AdamState.fresh(arch.num_params, **(adam or {}))
        self.epoch = 0
        self.cursor = 0  # windows consumed in the current epoch

        x, y = dataset.train_arrays
        self.stats = ChannelStats.from_array(x) if (standardize and len(y)) else None
        self._x = self.stats.apply(x) if self.stats is not None else x
        self._y = y
        self._order = self._permutation(0)

    @property
    def passive(self) -> bool:
        return self._y.shape[0] == 0

    @property
    def size_weight(self) -> int:
        return self.dataset.size_weight

    def batches_per_epoch(self, batch_size: int) -> int:
        return math.ceil(self._y.shape[0] / batch_size)

    def _permutation(self, epoch: int) -> np.ndarray:
        n = self._y.shape[0]
        return np.random.default_rng([self.rng_seed, epoch]).permutation(n)

    # -- parameters

    def get_params(self) -> np.ndarray:
        snapshot = self._params.copy()
        snapshot.flags.writeable = False
        return snapshot

    def set_params(self, params: np.ndarray) -> None:
        self._params = np.array(check_params(params, self.arch), dtype=np.float64)
        if self.reset_optimizer_on_set:
            self.adam = self.adam.reset()

    # -- training

    def train_one_batch(self, batch_size: int) -> float | None:
        """One Adam step on the next batch; returns the batch loss.

        The final batch of an epoch may be short. Passive agents return None.
        """
        if batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if self.passive:
            return None
        n = self._y.shape[0]
        idx = self._order[self.cursor:self.cursor + batch_size]
        loss, grad = loss_and_grad_arrays(self._params, self.arch, self._x[idx], self._y[idx])
        self._params, self.adam = adam_step(self._params, grad, self.adam)
        self.cursor += idx.shape[0]
        if self.cursor >= n:
            self.epoch += 1
            self.cursor = 0
            self._order = self._permutation(self.epoch)
        return loss

    # -- evaluation

    def prepare(self, windows: Sequence[SensorWindow] | tuple[np.ndarray, np.ndarray]
                ) -> tuple[np.ndarray, np.ndarray]:
        """Stack (if needed) and standardize windows with this agent's statistics."""
        if isinstance(windows, tuple):
            x, y = windows
        else:
            if len(windows) == 0:
                raise UsageError("nothing to evaluate")
            x, y = stack_windows(windows)
        if y.shape[0] == 0:
            raise UsageError("nothing to evaluate")
        return (self.stats.apply(x) if self.stats is not None else x), y

    def evaluate(self, windows: Sequence[SensorWindow] | tuple[np.ndarray, np.ndarray],
                 epoch: int | None = None, *, prepared: bool = False) -> MetricsRecord:
        """Metrics of the current model on ``windows``. Does not change state."""
        x, y = windows if prepared else self.prepare(windows)
        preds, losses = [], []
        for s in range(0, y.shape[0], EVAL_CHUNK):
            logits = forward_batch(self._params, self.arch, x[s:s + EVAL_CHUNK])
            preds.append(np.argmax(logits, axis=1))
            losses.append(cross_entropy(logits, y[s:s + EVAL_CHUNK]))
        conf = confusion_matrix(y, np.concatenate(preds), self.arch.num_classes)
        return MetricsRecord(
            agent_id=self.agent_id,
            epoch=self.epoch if epoch is None else epoch,
            macro_f1=macro_f1(conf),
            per_class_f1=per_class_f1(conf),
            confusion=conf,
            mean_loss=float(np.concatenate(losses).mean()),
        )

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.get_params(), self.adam, self.epoch, self.cursor)

    def restore(self, ckpt: Checkpoint) -> None:
        self._params = np.array(check_params(ckpt.params, self.arch), dtype=np.float64)
        self.adam = ckpt.adam
        self.epoch = ckpt.epoch
        self.cursor = ckpt.cursor
        self._order = self._permutation(self.epoch)
