"""CTC likelihood, its gradient, and the two decoders."""
# %%
import numpy as np

from decoar.ctc import ctc_grad, ctc_loss, edit_distance, greedy_decode, prefix_beam_decode

# %% Two frames, one label "a", uniform over {a, blank}. Valid paths are
# aa, a_, _a, so the likelihood is 3/4.
lp = np.log(np.full((2, 2), 0.5))
print("loss:", ctc_loss(lp, [0]), " -log(3/4):", -np.log(0.75))

# %% The gradient with respect to logits is softmax minus state occupancy,
# so every row sums to zero.
rng = np.random.default_rng(1)
logits = rng.normal(size=(6, 4))
lp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
g = ctc_grad(lp, [0, 2, 2])
print("row sums of the gradient:", np.round(g.sum(1), 12))

# %% Greedy takes the best symbol per frame. Prefix beam search sums over
# all paths that share a labeling, which can change the answer.
lp = np.log(np.array([[0.3, 0.0001, 0.6999], [0.3, 0.0001, 0.6999]]))
print("greedy:", greedy_decode(lp), " beam:", prefix_beam_decode(lp, beam_width=8))

# %% Scoring breaks errors down into substitutions, insertions and deletions.
ref, hyp = list("kitten"), list("sitting")
c = edit_distance(ref, hyp)
print(f"distance {c.distance}: S={c.substitutions} I={c.insertions} D={c.deletions}")
