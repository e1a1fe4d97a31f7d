"""End-to-end walkthrough on a small synthetic corpus (about two minutes on one core).

Builds the action vocabulary, pretrains the planner on next-action prediction,
fine-tunes the conditioned LM with soft selection and a halfway unfreeze,
then reports perplexity and samples a continuation with its plan.

    python3 demos/quickstart.py
"""

import numpy as np

from planlm import (
    ConditionedLM, JointTrainer, PlannerModel, SegmentedCorpus, TrainingSchedule, cluster_corpus, evaluate_nap,
    generate, perplexity, plan_matching_accuracy, pretrain_planner, synthetic_texts,
)

SEED = 0

texts, _ = synthetic_texts(1000, seed=SEED)
corpus = SegmentedCorpus.from_texts(texts, seed=SEED)
print(f"{len(corpus.documents)} documents, {len(corpus.windows('train'))} training windows")
print("sample document:", texts[0][:160].replace("\n", " "), "...")

vocab = cluster_corpus(corpus, K=16, seed=SEED, storage_dtype=np.float32)
print(f"k-means objective by iteration: {[round(x, 1) for x in vocab.fit_result.history[:6]]} ...")

planner = PlannerModel(vocab.K, d=32, n_layers=2, rng=np.random.default_rng([SEED, 101]))
pretrain_planner(planner, corpus, steps=300, lr=1e-3, seed=SEED)
print("planner next-action accuracy (val):", round(evaluate_nap(planner, corpus, "val")["accuracy"], 3))

lm = ConditionedLM(vocab.centroids, d_model=32, n_layers=2, rng=np.random.default_rng([SEED, 202]))
print("untrained perplexity:", round(perplexity(lm, planner, corpus, "val", "soft", max_windows=100), 1))

schedule = TrainingSchedule(total_steps=300, lr=1e-3, planner_lr=1e-4, batch_size=8, unfreeze="halfway",
                            mode="soft", seed=SEED)
trainer = JointTrainer(planner, lm, corpus, schedule)
trainer.train(log_every=100, on_log=lambda rec: print("  step", rec["step"], "ntp", round(rec["ntp"], 3)))
print("fine-tuned perplexity:", round(perplexity(lm, planner, corpus, "val", "soft", max_windows=100), 3))

prefix = corpus.documents[corpus.indices("test")[0]].sentences()[0]
g = generate(lm, planner, prefix, n_tokens=200, temperature=0.7, top_p=0.9, seed=SEED, mode="hard")
print("\nprefix:", prefix.strip())
print("continuation:", g.text)
print("planned actions per sentence:", g.plan)
if g.sentences:
    print("plan-matching accuracy of this sample:", round(plan_matching_accuracy([g], vocab), 2))
