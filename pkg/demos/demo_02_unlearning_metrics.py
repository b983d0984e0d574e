"""
Measuring forgetting with prediction sets
=========================================

ECF@c counts how often small prediction sets cover retained points. EuCF@d
counts how often small sets exclude forgotten points. Compare the base
model with one retrained without the forgotten class.
"""
from conformal_unlearning import harness
from conformal_unlearning.baselines import rt_unlearn
from conformal_unlearning.metrics import check_conformal_definition, evaluate_all

###############################################################################
# One seed of the desk configuration: ten classes, class 0 is forgotten.

cfg = harness.ExperimentConfig()
setup = harness.prepare_seed(cfg, seed=0)
b = setup.bundle
for name in ("train_forget", "train_retain", "unlearn_forget", "unlearn_retain", "test_calib"):
    print(f"{name:15s} {len(getattr(b, name)):5d}")

###############################################################################
# Six-subset reports at c = d = 5. The base model still covers the
# forgotten class, so its EuCF values sit near zero.

theta_r = rt_unlearn(b, cfg.train, cfg.hidden)
for label, params in (("base", setup.theta_o), ("retrained", theta_r)):
    rep = evaluate_all(params, b, alpha=0.1, c=5)
    print(f"\n{label}: H(CE)={rep.h_ce:.3f} beta_hat={rep.beta_hat:.3f}")
    for short in ("Tr", "Dr", "Vr"):
        print(f"  ECF {short}: {rep.ecf[short]:.3f}   acc {rep.accuracy[short]:.3f}")
    for short in ("Tf", "Df", "Vf"):
        print(f"  EuCF {short}: {rep.eucf[short]:.3f}  acc {rep.accuracy[short]:.3f}")

###############################################################################
# The frequency estimates behind the (alpha, beta) criterion.

chk = check_conformal_definition(theta_r, b, alpha=0.1, beta=0.5, c=5, d=5)
print("\nretrained model:", {k: round(v, 3) for k, v in chk.estimates.items()})
print("def1 holds:", chk.def1_holds, " def2 holds:", chk.def2_holds)
