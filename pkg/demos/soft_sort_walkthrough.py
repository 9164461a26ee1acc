"""Relaxed sorting of a short row, from soft to nearly hard."""

import numpy as np

from neco import RelaxFamily, Tensor, build_network, hard_sort_oracle, soft_sort

np.set_printoptions(precision=3, suppress=True)

values = np.array([0.7, -0.2, 1.5, 0.1, 0.9])
net = build_network("bitonic", len(values))  # padded to 8 internally
print("layers:", net.num_layers, "padded length:", net.padded_length)

for beta in (1.0, 10.0, 1e4):
    res = soft_sort(Tensor(values), net, RelaxFamily("logistic", beta))
    Q = res.perm.data
    print(f"\nbeta={beta:g}")
    print("Q (rows = rank, cols = input):")
    print(Q)
    print("row sums", Q.sum(1), "col sums", Q.sum(0))
    print("soft sorted:", res.sorted_values.data)

exact, P = hard_sort_oracle(values)
print("\nexact:", exact)
print("hard Q matches at beta=1e4:", np.abs(soft_sort(Tensor(values), net, RelaxFamily("logistic", 1e4)).perm.data - P).max() < 1e-3)

# arctan relaxation has heavier tails, so it needs a larger beta to look hard
for kind in ("logistic", "arctan"):
    Q = soft_sort(Tensor(values), net, RelaxFamily(kind, 10.0)).perm.data
    print(f"{kind:8s} max off-permutation mass at beta=10: {1 - Q.max(1).min():.3f}")

# odd-even network gives a different Q at finite beta but the same limit
oe = build_network("odd_even", len(values))
Qb = soft_sort(Tensor(values), net, RelaxFamily("logistic", 10.0)).perm.data
Qo = soft_sort(Tensor(values), oe, RelaxFamily("logistic", 10.0)).perm.data
print("bitonic vs odd-even at beta=10, max |diff|:", np.abs(Qb - Qo).max())
