"""Run directories and the stage pipeline behind the command line."""

from __future__ import annotations

import contextlib
import json
import logging
import os
from pathlib import Path

import numpy as np

from .actions import ActionVocabulary, SentenceEncoder, cluster_corpus
from .checkpoint import Checkpoint, file_digest
from .condlm import ConditionedLM, ConditioningMode
from .config import ExperimentConfig
from .corpus import SegmentedCorpus, load_texts, synthetic_texts
from .evaluation import EvalReport, evaluate, fit_hmm, generate
from .planner import PlannerModel, pretrain_planner
from .probe import run_probes
from .trainer import (
    JointTrainer, TrainingSchedule, pretrain_lm, pretrain_planner_e2e_lm_frozen,
)

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A stage's input is missing; the message names the stage to run first."""


class LockError(RuntimeError):
    pass


class RunDir:
    """``<dir>/<name>/{config.json, metrics.jsonl, corpus.jsonl, checkpoints/, reports/}``."""

    def __init__(self, root):
        self.root = Path(root)
        self.checkpoints = self.root / "checkpoints"
        self.reports = self.root / "reports"
        self.config = self.root / "config.json"
        self.metrics = self.root / "metrics.jsonl"
        self.corpus = self.root / "corpus.jsonl"
        self.lock_path = self.root / ".lock"

    def ckpt(self, name: str) -> Path:
        return self.checkpoints / f"{name}.plm"

    def report(self, name: str) -> Path:
        return self.reports / f"{name}.json"

    @contextlib.contextmanager
    def lock(self):
        self.root.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockError(f"{self.root} is in use by another process "
                            f"(remove {self.lock_path} if that process is gone)") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield self
        finally:
            self.lock_path.unlink(missing_ok=True)

    def require(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise StageError(f"{path} not found: run the '{stage}' stage first")
        return path

    def append_metrics(self, record: dict) -> None:
        with self.metrics.open("a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def write_report(self, name: str, payload: str) -> Path:
        self.reports.mkdir(parents=True, exist_ok=True)
        path = self.report(name)
        path.write_text(payload + "\n", encoding="utf-8")
        return path


class Experiment:
    """Executes configured stages; each stage reads its inputs from the run directory."""

    def __init__(self, config: ExperimentConfig):
        config.validate()
        self.cfg = config
        self.run_dir = RunDir(Path(config["run.dir"]) / config["run.name"])
        self.seed = int(config["run.seed"])

    # ------------------------------------------------------------ driver

    def run(self, stages=None) -> dict:
        stages = list(stages if stages is not None else self.cfg["run.stages"])
        results = {}
        with self.run_dir.lock():
            self.run_dir.config.write_text(self.cfg.to_json() + "\n", encoding="utf-8")
            for stage in stages:
                log.info("stage %s", stage)
                results[stage] = getattr(self, "stage_" + stage.replace("-", "_"))()
        return results

    def _meta(self, stage: str, parents: dict[str, Path] | None = None, **extra) -> dict:
        prov = {name: file_digest(p) for name, p in (parents or {}).items()}
        return {"stage": stage, "config": self.cfg.to_dict(), "parents": prov, **extra}

    def _log(self, record: dict) -> None:
        self.run_dir.append_metrics(record)

    # ------------------------------------------------------------ loaders

    def load_corpus(self) -> SegmentedCorpus:
        return SegmentedCorpus.load(self.run_dir.require(self.run_dir.corpus, "prepare"))

    def load_actions(self, corpus: SegmentedCorpus) -> ActionVocabulary:
        ck = Checkpoint.load(self.run_dir.require(self.run_dir.ckpt("actions"), "cluster"))
        enc = SentenceEncoder(**ck.meta["encoder"])
        vocab = ActionVocabulary(ck.tensors["centroids"].astype(np.float64), enc)
        if len(ck.meta["actions"]) != len(corpus.documents):
            raise StageError("action labels do not match the prepared corpus: rerun 'cluster'")
        corpus.actions = [np.asarray(a, dtype=np.int64) for a in ck.meta["actions"]]
        return vocab

    def new_planner(self, K: int) -> PlannerModel:
        c = self.cfg
        return PlannerModel(K, c["planner.d"], c["planner.layers"], c["planner.heads"],
                            c["planner.max_sentences"], rng=np.random.default_rng([self.seed, 101]))

    def new_lm(self, vocab: ActionVocabulary) -> ConditionedLM:
        c = self.cfg
        return ConditionedLM(vocab.centroids, c["lm.d_model"], c["lm.layers"], c["lm.heads"],
                             c["lm.context"], c["lm.adapter_layers"],
                             rng=np.random.default_rng([self.seed, 202]))

    def load_planner(self, K: int, name: str = "planner", stage: str = "pretrain-planner") -> PlannerModel:
        ck = Checkpoint.load(self.run_dir.require(self.run_dir.ckpt(name), stage))
        planner = self.new_planner(K)
        planner.load_state_dict(ck.subset("planner"))
        return planner

    def initial_lm(self, vocab: ActionVocabulary) -> tuple[ConditionedLM, dict]:
        """LM to start fine-tuning from: end-to-end stage output, pretrained body, or fresh."""
        lm = self.new_lm(vocab)
        for name in ("lm-init", "lm-pretrain"):
            path = self.run_dir.ckpt(name)
            if path.exists():
                lm.load_state_dict(Checkpoint.load(path).subset("lm"))
                return lm, {name: path}
        return lm, {}

    def load_finetuned(self, vocab: ActionVocabulary, name: str = "finetune"):
        path = self.run_dir.require(self.run_dir.ckpt(name), "finetune")
        ck = Checkpoint.load(path)
        lm = self.new_lm(vocab)
        lm.load_state_dict(ck.subset("lm"))
        planner = None
        if ck.meta.get("has_planner"):
            planner = self.new_planner(vocab.K)
            planner.load_state_dict(ck.subset("planner"))
        return lm, planner, path

    # ------------------------------------------------------------ stages

    def stage_prepare(self) -> SegmentedCorpus:
        c = self.cfg
        if c["corpus.source"] == "synthetic":
            texts, _ = synthetic_texts(c["corpus.n_docs"], c["corpus.n_templates"],
                                       c["corpus.n_genres"], self.seed)
        else:
            src = Path(c["corpus.source"])
            if not src.exists():
                raise StageError(f"corpus source {src} does not exist")
            texts = load_texts(src)
        corpus = SegmentedCorpus.from_texts(texts, c["corpus.window"], self.seed,
                                            c["corpus.val_frac"], c["corpus.test_frac"])
        corpus.meta = {"source": c["corpus.source"], "n_docs": len(texts)}
        self.run_dir.root.mkdir(parents=True, exist_ok=True)
        corpus.save(self.run_dir.corpus)
        return corpus

    def stage_cluster(self) -> ActionVocabulary:
        c = self.cfg
        corpus = self.load_corpus()
        vocab = cluster_corpus(corpus, c["actions.K"], c["actions.dim"], c["actions.hash_dim"],
                               self.seed, c["actions.max_sentences"], storage_dtype=np.float32)
        meta = self._meta("cluster", {"corpus": self.run_dir.corpus},
                          encoder=vocab.encoder.config, fingerprint=vocab.encoder_fingerprint,
                          actions=[a.tolist() for a in corpus.actions],
                          objective=vocab.fit_result.history)
        Checkpoint({"centroids": vocab.centroids}, meta).save(self.run_dir.ckpt("actions"))
        return vocab

    def stage_pretrain_lm(self) -> list[float]:
        c = self.cfg
        corpus = self.load_corpus()
        vocab = self.load_actions(corpus)
        lm = self.new_lm(vocab)
        losses = pretrain_lm(lm, corpus, c["lm.pretrain_steps"], c["lm.pretrain_lr"],
                             c["trainer.batch_size"], self.seed)
        self._log_trace("pretrain-lm", losses, "ntp", c["lm.pretrain_lr"])
        tensors = {f"lm.{k}": v for k, v in lm.state_dict().items()}
        Checkpoint(tensors, self._meta("pretrain-lm", {"actions": self.run_dir.ckpt("actions")})).save(
            self.run_dir.ckpt("lm-pretrain"))
        return losses

    def _log_trace(self, stage: str, losses: list[float], key: str, lr: float) -> None:
        every = max(1, self.cfg["trainer.log_every"])
        for a in range(0, len(losses), every):
            chunk = losses[a:a + every]
            rec = {"stage": stage, "step": a + len(chunk), "ntp": None, "nap": None, "f": None,
                   "lr": lr, "split": "train"}
            rec[key] = float(np.mean(chunk))
            self._log(rec)

    def stage_pretrain_planner(self) -> PlannerModel:
        c = self.cfg
        corpus = self.load_corpus()
        vocab = self.load_actions(corpus)
        planner = self.new_planner(vocab.K)
        parents = {"actions": self.run_dir.ckpt("actions")}
        if c["planner.pretrain"] == "nap":
            losses = pretrain_planner(planner, corpus, c["planner.steps"], c["planner.lr"],
                                      c["planner.batch_size"], self.seed)
            self._log_trace("pretrain-planner", losses, "nap", c["planner.lr"])
        else:
            lm, lm_parents = self.initial_lm(vocab)
            parents.update(lm_parents)
            losses = pretrain_planner_e2e_lm_frozen(planner, lm, corpus, c["planner.steps"],
                                                    c["planner.lr"], c["planner.batch_size"], self.seed)
            self._log_trace("pretrain-planner", losses, "ntp", c["planner.lr"])
            tensors = {f"lm.{k}": v for k, v in lm.state_dict().items()}
            Checkpoint(tensors, self._meta("pretrain-planner", parents)).save(self.run_dir.ckpt("lm-init"))
        tensors = {f"planner.{k}": v for k, v in planner.state_dict().items()}
        Checkpoint(tensors, self._meta("pretrain-planner", parents, variant=c["planner.pretrain"])).save(
            self.run_dir.ckpt("planner"))
        return planner

    def stage_finetune(self, cfg: ExperimentConfig | None = None, name: str = "finetune"):
        cfg = cfg or self.cfg
        corpus = self.load_corpus()
        vocab = self.load_actions(corpus)
        mode = ConditioningMode.parse(cfg["trainer.mode"])
        nap_weight = cfg["trainer.nap_weight"] if cfg["trainer.nap_finetune"] else 0.0
        needs_planner = mode.uses_planner or nap_weight > 0 or mode.eval_mode.uses_planner
        planner = None
        parents = {"actions": self.run_dir.ckpt("actions")}
        if needs_planner:
            planner = self.load_planner(vocab.K)
            parents["planner"] = self.run_dir.ckpt("planner")
        lm, lm_parents = self.initial_lm(vocab)
        parents.update(lm_parents)
        schedule = TrainingSchedule(
            total_steps=cfg["trainer.steps"], lr=cfg["trainer.lr"], batch_size=cfg["trainer.batch_size"],
            unfreeze=cfg["trainer.unfreeze"], predicted_fraction=cfg["trainer.predicted_fraction"],
            nap_weight=nap_weight, mode=mode, seed=self.seed,
            planner_lr=cfg["trainer.planner_lr"])
        trainer = JointTrainer(planner if mode.uses_planner or nap_weight > 0 else None,
                               lm, corpus, schedule)

        def on_log(rec):
            self._log({"stage": name, **rec})

        trainer.train(log_every=cfg["trainer.log_every"], on_log=on_log)
        tensors = {f"lm.{k}": v for k, v in lm.state_dict().items()}
        if planner is not None:
            tensors.update({f"planner.{k}": v for k, v in planner.state_dict().items()})
        tensors.update(trainer.state_arrays())
        meta = self._meta(name, parents, has_planner=planner is not None, **trainer.state_meta())
        meta["config"] = cfg.to_dict()
        Checkpoint(tensors, meta).save(self.run_dir.ckpt(name))
        return lm, planner

    def stage_eval(self, cfg: ExperimentConfig | None = None, name: str = "finetune") -> EvalReport:
        cfg = cfg or self.cfg
        corpus = self.load_corpus()
        vocab = self.load_actions(corpus)
        lm, planner, _ = self.load_finetuned(vocab, name)
        c = cfg
        critic = fit_hmm([corpus.actions[i] for i in corpus.indices("train")], c["eval.hmm_states"],
                         K=vocab.K, seed=self.seed)
        report = evaluate(lm, planner, vocab, corpus, c["eval.split"], c["trainer.mode"],
                          tuple(c["eval.lengths"]), c["eval.norm_base"], c["eval.prefix_sentences"],
                          c["eval.n_docs"], c["eval.n_unconditional"], None, c["eval.temperature"],
                          c["eval.top_p"], c["eval.hmm_states"], self.seed, c["eval.max_windows"],
                          critic=critic)
        report.meta["checkpoint"] = name
        report.meta["predicted_fraction"] = c["trainer.predicted_fraction"]
        report_name = "eval" if name == "finetune" else f"eval-{name}"
        self.run_dir.write_report(report_name, report.to_json())
        return report

    def stage_probe(self):
        c = self.cfg
        corpus = self.load_corpus()
        vocab = self.load_actions(corpus)
        lm, planner, _ = self.load_finetuned(vocab)
        report = run_probes(lm, planner, corpus, tuple(c["probe.distances"]), None, c["trainer.mode"],
                            "train", c["probe.split"], c["probe.train_windows"], c["probe.eval_windows"],
                            c["probe.steps"], c["probe.lr"], self.seed)
        self.run_dir.write_report("probe", report.to_json())
        return report

    def stage_generate(self) -> list[dict]:
        c = self.cfg
        corpus = self.load_corpus()
        vocab = self.load_actions(corpus)
        lm, planner, _ = self.load_finetuned(vocab)
        mode = c["trainer.mode"] if (planner is not None or c["trainer.mode"] == "uniform") else None
        samples = []
        for k in range(c["generate.count"]):
            g = generate(lm, planner, c["generate.prefix"], c["generate.n_tokens"],
                         c["generate.temperature"], c["generate.top_p"], self.seed + k, mode)
            samples.append({"prefix": c["generate.prefix"], "text": g.text, "plan": g.plan,
                            "sentences": [{"text": t, "planned": a, "realized": vocab.label_text(t)}
                                          for t, a in g.sentences]})
        self.run_dir.write_report("generate", json.dumps(samples, indent=2, sort_keys=True))
        return samples

    def stage_sweep(self) -> list[EvalReport]:
        """Fine-tune and evaluate once per predicted-action fraction."""
        reports = []
        lines = []
        for f in self.cfg["sweep.fractions"]:
            cfg = self.cfg.replace(trainer__predicted_fraction=float(f))
            name = f"sweep-f{float(f):g}"
            self.stage_finetune(cfg, name)
            report = self.stage_eval(cfg, name)
            reports.append(report)
            rows = report.csv_row(header=not lines).splitlines()
            if not lines:
                lines.append("predicted_fraction," + rows[0])
            lines.append(f"{float(f):g}," + rows[-1])
        self.run_dir.reports.mkdir(parents=True, exist_ok=True)
        (self.run_dir.reports / "sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        return reports


def run_experiment(config: ExperimentConfig | dict, stages=None) -> dict:
    if isinstance(config, dict):
        config = ExperimentConfig(config)
    return Experiment(config).run(stages)
