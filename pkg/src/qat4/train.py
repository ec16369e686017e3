"""Epoch loop: batching, train steps, evaluation, logging and checkpoints."""

import logging
import os
import time

import numpy as np

from . import checkpoint
from .errors import DivergenceError
from .data import batch_iter, num_batches
from .model import build_vgg4bit
from .optim import QuantAwareAdamW, TrainState, step_state
from .telemetry import EpochRecord, evaluate, max_abs_masters, write_log

log = logging.getLogger(__name__)


def new_state(cfg, steps_per_epoch):
    net = build_vgg4bit(cfg.model_config(), seed=cfg.seed)
    opt = QuantAwareAdamW(net.params(), cfg.optim_config())
    return TrainState(net, opt, cfg.lr_schedule(), seed=cfg.seed,
                      steps_per_epoch=steps_per_epoch)


def run_epoch(state, train_ds, batch_size, augment):
    """Train over one epoch from the state's clock; resumes mid-epoch if needed."""
    losses, correct, seen, norms = [], 0, 0, []
    batches = batch_iter(train_ds, batch_size, seed=state.seed, epoch=state.epoch,
                         augment=augment)
    for i, (x, y) in enumerate(batches):
        if i < state.step_in_epoch:
            continue
        report = step_state(state, x, y)
        losses.append(report.loss * len(y))
        correct += round(report.accuracy * len(y))
        seen += len(y)
        norms.append(report.grad_norm)
    return (sum(losses) / max(seen, 1), correct / max(seen, 1),
            float(np.mean(norms)) if norms else 0.0)


def fit(cfg, train_ds, test_ds, out_dir=None, state=None, on_epoch=None):
    """Train until ``cfg.epochs``; returns the list of EpochRecords written.

    With ``out_dir`` the log (``train.log``), the last checkpoint
    (``last.nibm``) and the best-test-accuracy checkpoint (``best.nibm``)
    are kept there.
    """
    steps = num_batches(len(train_ds), cfg.batch_size)
    state = state if state is not None else new_state(cfg, steps)
    augment = cfg.augment_config()
    log_path = os.path.join(out_dir, "train.log") if out_dir else None
    header = {"normalization": {"mean": list(augment.mean), "std": list(augment.std)},
              "seed": cfg.seed}
    records = []
    while state.epoch < cfg.epochs:
        t0 = time.perf_counter()
        lr = state.lr()
        try:
            train_loss, train_acc, gnorm = run_epoch(state, train_ds, cfg.batch_size, augment)
        except DivergenceError:
            if log_path:
                nan = float("nan")
                write_log(EpochRecord(epoch=state.epoch + 1, train_loss=nan, train_acc=nan,
                                      test_acc=nan, test_loss=nan, lr=lr,
                                      seconds=time.perf_counter() - t0, nan_flag=True),
                          log_path, header)
            raise
        test_acc, test_loss = evaluate(state.net, test_ds, augment, cfg.eval_batch_size)
        levels = state.net.unique_levels()
        counts = list(levels.values())
        record = EpochRecord(
            epoch=state.epoch + 1, train_loss=train_loss, train_acc=train_acc,
            test_acc=test_acc, test_loss=test_loss, lr=lr, unique_levels=levels,
            unique_min=min(counts), unique_max=max(counts),
            unique_mean=float(np.mean(counts)),
            max_abs_master=max_abs_masters(state.net), grad_norm_mean=gnorm,
            seconds=time.perf_counter() - t0, nan_flag=False)
        state.epoch += 1
        state.step_in_epoch = 0
        improved = test_acc > state.best_acc
        state.best_acc = max(state.best_acc, test_acc)
        records.append(record)
        log.info("epoch %d  loss %.4f  train %.4f  test %.4f  levels %d-%d",
                 record.epoch, train_loss, train_acc, test_acc, record.unique_min,
                 record.unique_max)
        if out_dir:
            write_log(record, log_path, header)
            if improved:
                checkpoint.save_master(os.path.join(out_dir, "best.nibm"), state)
            if state.epoch % cfg.checkpoint_every == 0 or state.epoch == cfg.epochs:
                checkpoint.save_master(os.path.join(out_dir, "last.nibm"), state)
        if on_epoch is not None:
            on_epoch(record, state)
    return records
