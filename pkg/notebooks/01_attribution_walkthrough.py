# %% [markdown]
# # Head relevance on a small trained model
#
# Trains a 2-layer model for a few hundred steps on synthetic biographies,
# explains one counterfactual answer with LRP, and checks that the heads
# with the most relevance are the ones whose removal hurts the answer logit.
# Runs in well under a minute on one CPU core.

# %%
import numpy as np

from headatlas import corpus as cp
from headatlas.attribution import attribute, head_relevance, input_heatmap, spearman
from headatlas.model import InterventionSpec, ModelConfig, forward
from headatlas.training import TrainOptions, train

tok = cp.Tokenizer()
records = cp.generate_corpus(64, seed=0)
train_ids, eval_ids = cp.split_entities(records, 0.25, seed=0)
print(cp.render_bio(records[0]))

# %%
cfg = ModelConfig(n_layers=2, n_heads=4, model_dim=32, mlp_dim=64, vocab_size=len(tok),
                  max_seq_len=96, seed=0)
weights = train(cfg, records, train_ids,
                TrainOptions(steps=400, lr=3e-3, batch_closed=16, batch_open=16, batch_bio=4,
                             warmup=20, probe_size=0))

# %% [markdown]
# A counterfactual prompt: the context carries another entity's value, and
# the model should copy it.

# %%
r, other = records[train_ids[0]], records[train_ids[1]]
ex = cp.build_qa_example(r, "counterfactual", "occupation", other)
ids = tok.encode(ex.prompt)
trace = forward(weights, ids)
target = int(np.argmax(trace.logits[-1]))
print("context says:", ex.counterfactual, "| memorised:", ex.gold,
      "| model predicts:", tok.decode([target]))

rt = attribute(weights, trace, target, len(ids) - 1)
print("conservation error:", rt.audit_error())
print("head relevance:\n", np.round(head_relevance(rt), 3))

# %%
heat = input_heatmap(rt)
top = np.argsort(-heat)[:5]
print("most relevant input tokens:", [(ex.prompt[i], round(float(heat[i]), 3)) for i in top])

# %% [markdown]
# Single-head ablations: the logit drop per head should rank heads much
# like their relevance does.

# %%
base = trace.logits[-1, target]
drop = np.array([base - forward(weights, ids, InterventionSpec(ablate_heads=frozenset([h])))
                 .logits[-1, target] for h in cfg.heads()]).reshape(cfg.n_layers, cfg.n_heads)
print("ablation drop:\n", np.round(drop, 3))
print("Spearman:", spearman(head_relevance(rt), drop))
