"""
Split conformal prediction on a Gaussian mixture
================================================

Train a small classifier, calibrate a score threshold on held-out data and
look at the prediction sets it produces.
"""
import numpy as np

from conformal_unlearning.conformal import calibrate, empirical_coverage, prediction_sets
from conformal_unlearning.data import generate_mixture
from conformal_unlearning.model import TrainConfig, accuracy, init_params, train

###############################################################################
# Ten Gaussian classes in eight dimensions. Three disjoint slices serve as
# training, calibration and test data.

data = generate_mixture(n_classes=10, n_dims=8, n_per_class=600, separation=3.5, seed=0)
order = np.random.default_rng(0).permutation(len(data))
train_set = data.take(order[:3000])
calib_set = data.take(order[3000:4000])
test_set = data.take(order[4000:])

model = train(init_params(8, 10, seed=0), train_set, TrainConfig(seed=0))
print(f"test accuracy: {accuracy(model, test_set):.3f}")

###############################################################################
# The score of a labelled point is ``1 - p(y|x)``. The threshold is the
# ``ceil((1 - alpha)(n + 1))``-th smallest calibration score.

for alpha in (0.2, 0.1, 0.05, 0.01):
    cal = calibrate(model, calib_set, alpha)
    sets = prediction_sets(model, test_set.features, cal)
    print(
        f"alpha={alpha:<5} q_hat={cal.q_hat:.4f} "
        f"coverage={empirical_coverage(model, cal, test_set):.3f} "
        f"mean set size={sets.sum(1).mean():.2f}"
    )

###############################################################################
# With fewer than ``1/alpha - 1`` calibration points the rank exceeds ``n``:
# the threshold becomes infinite and every set contains every label.

tiny = calib_set.take(np.arange(5))
cal = calibrate(model, tiny, 0.1)
print("q_hat with n=5, alpha=0.1:", cal.q_hat)
print("set sizes:", np.unique(prediction_sets(model, test_set.features, cal).sum(1)))
