"""The patch neighbor consistency loss on hand-made features.

Student and teacher patches are ranked against a shared set of reference
patches; the loss is the cross-entropy between the two relaxed rankings.
"""

import numpy as np

from neco import LossConfig, ReferenceSet, Tensor, neco_loss
from neco.autodiff import grad

rng = np.random.default_rng(0)
n, R, d = 6, 8, 16

refs = ReferenceSet(Tensor(rng.normal(size=(R, d))), np.zeros((R, 2), dtype=np.int64), "inter")
teacher = rng.normal(size=(n, d))
cfg = LossConfig(num_references=R)

# identical features: the loss is the entropy of the teacher's soft ranking, not zero
same = neco_loss(Tensor(teacher), Tensor(teacher), refs, cfg).data
print("student == teacher:", float(same))

# a noisy student ranks the references differently and pays for it
for noise in (0.1, 0.5, 2.0):
    student = teacher + noise * rng.normal(size=(n, d))
    print(f"noise {noise:>3}: loss {float(neco_loss(Tensor(student), Tensor(teacher), refs, cfg).data):8.3f}")

# all distances tied gives the uniform value R ln R per row
flat = np.ones((n, d))
tied = ReferenceSet(Tensor(np.ones((R, d))), np.zeros((R, 2), dtype=np.int64), "inter")
print("ties:", float(neco_loss(Tensor(flat), Tensor(flat), tied, cfg).data), "vs", n * R * np.log(R))

# gradient flows to the student only
student = Tensor(teacher + 0.5 * rng.normal(size=(n, d)))
value, (g,) = grad(lambda s: neco_loss(s, Tensor(teacher), refs, cfg), student)
print(f"loss {value:.3f}, grad norm on student {np.linalg.norm(g):.3f}")

# cheaper variants
for variant in (LossConfig(num_references=R, top_k=4), LossConfig(num_references=R, network_kind="none"),
                LossConfig(num_references=R, similarity="euclidean")):
    print(variant.network_kind, variant.top_k, variant.similarity, "->",
          float(neco_loss(student.detach(), Tensor(teacher), refs, variant).data))
