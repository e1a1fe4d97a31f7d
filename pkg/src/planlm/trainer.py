"""Joint planner + LM fine-tuning: conditioning modes, unfreeze schedules, oracle mixing."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .condlm import ConditionedLM, ConditioningMode, conditioning_weights, ntp_loss, onehot
from .corpus import Batch, SegmentedCorpus, Window, collate
from .optim import Adam
from .planner import NumericError, PlannerModel, batch_input, slot_logits
from .tensor import Tape, Tensor, cross_entropy, matmul, mul, no_grad

log = logging.getLogger(__name__)


class UnfreezePolicy(str, enum.Enum):
    IMMEDIATE = "immediate"
    HALFWAY = "halfway"
    NEVER = "never"


@dataclass
class TrainingSchedule:
    total_steps: int = 2000
    lr: float = 1e-4
    batch_size: int = 32
    unfreeze: UnfreezePolicy = UnfreezePolicy.HALFWAY
    predicted_fraction: float | str = 1.0     # probability of planner input, or "linear"
    nap_weight: float = 0.0
    mode: ConditioningMode = ConditioningMode.SOFT
    seed: int = 0
    planner_lr: float | None = None

    def __post_init__(self):
        self.unfreeze = UnfreezePolicy(self.unfreeze)
        self.mode = ConditioningMode.parse(self.mode)
        f = self.predicted_fraction
        if isinstance(f, str):
            if f != "linear":
                self.predicted_fraction = float(f)
        if not isinstance(self.predicted_fraction, str) and not 0.0 <= self.predicted_fraction <= 1.0:
            raise ValueError(f"predicted_fraction must be in [0, 1], got {self.predicted_fraction}")
        if self.nap_weight < 0:
            raise ValueError("nap_weight must be >= 0")
        if self.total_steps < 0 or self.batch_size < 1:
            raise ValueError("total_steps must be >= 0 and batch_size >= 1")

    def fraction(self, step: int) -> float:
        if self.predicted_fraction == "linear":
            return step / self.total_steps if self.total_steps else 1.0
        return float(self.predicted_fraction)

    @property
    def unfreeze_step(self) -> int | None:
        if self.unfreeze is UnfreezePolicy.IMMEDIATE:
            return 0
        if self.unfreeze is UnfreezePolicy.HALFWAY:
            return math.ceil(self.total_steps / 2)
        return None

    def planner_trainable(self, step: int) -> bool:
        at = self.unfreeze_step
        return at is not None and step >= at


def mix_actions(pred_weights: Tensor, oracle: np.ndarray, fraction: float,
                rng: np.random.Generator, mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Per sentence, keep the planner-derived weights with probability ``fraction``,
    otherwise substitute the oracle one-hot.

    One uniform draw is consumed per valid sentence in row-major (sentence) order,
    whatever the fraction. Returns the mixed weights and the boolean choice mask.
    """
    oracle = np.asarray(oracle)
    if mask is None:
        mask = oracle >= 0
    draws = rng.random(int(mask.sum()))
    use_pred = np.zeros(mask.shape, dtype=bool)
    use_pred[mask] = draws < fraction
    K = pred_weights.shape[-1]
    if use_pred[mask].all():
        return pred_weights, use_pred
    oracle_w = onehot(np.where(mask & ~use_pred, oracle, -1), K, dtype=pred_weights.dtype)
    if not use_pred.any():
        return Tensor(oracle_w), use_pred
    keep = np.broadcast_to(use_pred[..., None], oracle_w.shape).astype(pred_weights.dtype)
    return mul(pred_weights, Tensor(keep)) + Tensor(oracle_w), use_pred


@dataclass
class TrainState:
    step: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    order: list[int] = field(default_factory=list)
    epoch: int = 0

    def to_json(self) -> dict:
        return {"step": self.step, "epoch": self.epoch, "order": list(self.order),
                "rng": _jsonable(self.rng.bit_generator.state)}

    @classmethod
    def from_json(cls, data: dict) -> "TrainState":
        rng = np.random.default_rng()
        rng.bit_generator.state = data["rng"]
        return cls(int(data["step"]), rng, [int(i) for i in data["order"]], int(data["epoch"]))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


class JointTrainer:
    """Runs joint steps over a window stream with per-group Adam.

    Parameter groups are ``planner``, ``lm`` (decoder body) and ``adapters``.
    The planner group is stepped only while the unfreeze policy allows it;
    the other two are always trainable.
    """

    def __init__(self, planner: PlannerModel | None, lm: ConditionedLM, corpus: SegmentedCorpus,
                 schedule: TrainingSchedule, windows: list[Window] | None = None):
        self.planner = planner
        self.lm = lm
        self.corpus = corpus
        self.schedule = schedule
        self.windows = windows if windows is not None else corpus.windows("train")
        if not self.windows:
            raise ValueError("no training windows")
        groups = {"lm": lm.base_parameters(), "adapters": lm.adapter_parameters()}
        lrs = {"lm": schedule.lr, "adapters": schedule.lr}
        if planner is not None:
            groups["planner"] = list(planner.named_parameters())
            lrs["planner"] = schedule.planner_lr if schedule.planner_lr is not None else schedule.lr
        self.opt = Adam(groups, lrs)
        self.state = TrainState(rng=np.random.default_rng([schedule.seed, 23]))

    # ------------------------------------------------------------------ data

    def next_batch(self) -> Batch:
        st = self.state
        bs = self.schedule.batch_size
        if len(st.order) < bs:
            st.order.extend(st.rng.permutation(len(self.windows)).tolist())
            st.epoch += 1
        ids, st.order = st.order[:bs], st.order[bs:]
        return collate(self.corpus, [self.windows[i] for i in ids])

    # ------------------------------------------------------------------ step

    def _needs_planner(self) -> bool:
        sch = self.schedule
        return self.planner is not None and (sch.mode.uses_planner or sch.nap_weight > 0)

    def joint_step(self, batch: Batch | None = None) -> dict:
        """One optimization step. Returns ``{step, ntp, nap, total, f}``.

        total = ntp + nap_weight * nap; nap is None when the planner is not run.
        """
        sch = self.schedule
        st = self.state
        batch = batch if batch is not None else self.next_batch()
        step = st.step
        f = sch.fraction(step)
        trainable = self.planner is not None and sch.planner_trainable(step)
        K = self.lm.K
        mask = batch.slot_mask
        with Tape() as tape:
            logits = rows = targets = None
            if self._needs_planner():
                if trainable:
                    logits, rows, targets = slot_logits(self.planner, self.corpus, batch)
                else:
                    with no_grad():
                        logits, rows, targets = slot_logits(self.planner, self.corpus, batch)
            if sch.mode is ConditioningMode.ORACLE:
                weights = conditioning_weights(sch.mode, K, oracle=batch.oracle, mask=mask)
            else:
                pred = conditioning_weights(sch.mode, K, logits=logits, oracle=batch.oracle, mask=mask)
                weights, _ = mix_actions(pred, batch.oracle, f, st.rng, mask)
            ntp = ntp_loss(self.lm, batch.tokens, batch.slot_index, weights, mask)
            total = ntp
            nap = None
            if rows is not None and (targets >= 0).any():
                nap = cross_entropy(rows, targets)
                if sch.nap_weight > 0:
                    total = ntp + nap * sch.nap_weight
        ntp_v = ntp.item()
        nap_v = nap.item() if nap is not None else None
        if not math.isfinite(ntp_v) or (nap_v is not None and not math.isfinite(nap_v)):
            raise NumericError(f"non-finite loss at step {step}: ntp={ntp_v} nap={nap_v} "
                               f"mode={sch.mode.value} f={f}")
        tape.backward(total)
        groups = ["lm", "adapters"] + (["planner"] if trainable else [])
        self.opt.step(groups)
        self.opt.zero_grad()
        st.step += 1
        total_v = ntp_v + sch.nap_weight * nap_v if (nap_v is not None and sch.nap_weight > 0) else ntp_v
        return {"step": step, "ntp": ntp_v, "nap": nap_v, "total": total_v, "f": f}

    def train(self, steps: int | None = None, log_every: int = 0, on_log=None) -> list[dict]:
        """Run until ``steps`` more steps (default: to ``total_steps``)."""
        end = self.schedule.total_steps if steps is None else self.state.step + steps
        history = []
        acc: list[dict] = []
        while self.state.step < end:
            rec = self.joint_step()
            history.append(rec)
            acc.append(rec)
            if log_every and on_log is not None and (rec["step"] + 1) % log_every == 0:
                on_log(_summarize(acc, self.schedule))
                acc = []
        return history

    # ------------------------------------------------------------- persistence

    def state_arrays(self) -> dict[str, np.ndarray]:
        return self.opt.state_arrays()

    def state_meta(self) -> dict:
        return {"train_state": self.state.to_json(), "adam_steps": dict(self.opt.t)}

    def load_state(self, arrays: dict, meta: dict) -> None:
        self.opt.load_state_arrays(arrays, meta["adam_steps"])
        self.state = TrainState.from_json(meta["train_state"])


def _summarize(records: list[dict], schedule: TrainingSchedule) -> dict:
    naps = [r["nap"] for r in records if r["nap"] is not None]
    return {
        "step": records[-1]["step"] + 1,
        "ntp": float(np.mean([r["ntp"] for r in records])),
        "nap": float(np.mean(naps)) if naps else None,
        "f": records[-1]["f"],
        "lr": schedule.lr,
        "split": "train",
    }


def joint_step(trainer: JointTrainer, batch: Batch | None = None) -> dict:
    return trainer.joint_step(batch)


def pretrain_planner_e2e_lm_frozen(planner: PlannerModel, lm: ConditionedLM, corpus: SegmentedCorpus,
                                   steps: int, lr: float = 1e-4, batch_size: int = 32,
                                   seed: int = 0) -> list[float]:
    """Train the planner only through the next-token loss (soft conditioning).

    The LM body and action embeddings stay frozen; adapter projections train
    alongside the planner, since with zero projections the planner would get
    no gradient at all.
    """
    windows = corpus.windows("train")
    rng = np.random.default_rng([seed, 29])
    proj = [(n, p) for n, p in lm.adapter_parameters() if ".projection." in n]
    opt = Adam({"planner": list(planner.named_parameters()), "projection": proj}, lr)
    order: list[int] = []
    losses = []
    K = lm.K
    for step in range(steps):
        if len(order) < batch_size:
            order.extend(rng.permutation(len(windows)).tolist())
        ids, order = order[:batch_size], order[batch_size:]
        batch = collate(corpus, [windows[i] for i in ids])
        with Tape() as tape:
            logits, _, _ = slot_logits(planner, corpus, batch)
            weights = conditioning_weights(ConditioningMode.SOFT, K, logits=logits)
            loss = ntp_loss(lm, batch.tokens, batch.slot_index, weights, batch.slot_mask)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"end-to-end planner pretraining diverged at step {step}")
        tape.backward(loss)
        opt.step()
        lm.zero_grad()
        planner.zero_grad()
        losses.append(value)
    return losses


def pretrain_lm(lm: ConditionedLM, corpus: SegmentedCorpus, steps: int, lr: float = 1e-3,
                batch_size: int = 32, seed: int = 0) -> list[float]:
    """Plain next-token training of the decoder body, adapters bypassed."""
    windows = corpus.windows("train")
    rng = np.random.default_rng([seed, 31])
    opt = Adam({"lm": lm.base_parameters()}, lr)
    order: list[int] = []
    losses = []
    for step in range(steps):
        if len(order) < batch_size:
            order.extend(rng.permutation(len(windows)).tolist())
        ids, order = order[:batch_size], order[batch_size:]
        batch = collate(corpus, [windows[i] for i in ids])
        with Tape() as tape:
            loss = ntp_loss(lm, batch.tokens)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"LM pretraining diverged at step {step}")
        tape.backward(loss)
        opt.step()
        lm.zero_grad()
        losses.append(value)
    return losses
