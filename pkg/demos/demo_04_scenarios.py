"""
Class, group and instance forgetting
====================================

The same pipeline handles three ways of choosing what to forget.
"""
from conformal_unlearning import harness
from conformal_unlearning.metrics import evaluate_all

###############################################################################
# Group-wise: k-means clusters of the base model's penultimate activations.
# Instance-wise: random training points, so there is no unseen forget set.

for text in (
    "scenario.kind=class_wise\n",
    "scenario.kind=group_wise\nscenario.n_clusters=20\n",
    "scenario.kind=instance_wise\nscenario.n_forget=300\n",
):
    cfg = harness.parse_config(text)
    setup = harness.prepare_seed(cfg, seed=0)
    theta_u, seconds, _ = harness.apply_method(cfg, setup)
    b = setup.bundle
    before = evaluate_all(setup.theta_o, b, 0.1, 5)
    after = evaluate_all(theta_u, b, 0.1, 5)
    print(f"{cfg.scenario.kind:14s} |D_f|={len(b.unlearn_forget):4d} |V_f|={len(b.test_forget):4d} "
          f"EuCF Df {before.eucf['Df']:.3f} -> {after.eucf['Df']:.3f}  "
          f"ECF Dr {before.ecf['Dr']:.3f} -> {after.ecf['Dr']:.3f}")
