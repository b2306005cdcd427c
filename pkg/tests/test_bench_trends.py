"""Trend-level behavior on the committed desk benchmark (shared `bench`
fixture): the trained-model expectations that individual module tests cannot
check cheaply."""


def mean(bench, key):
    return bench["reports"][key]["mean"]


def test_source_training_quality(bench):
    assert mean(bench, "source_train_eval") > 0.8
    assert mean(bench, "source_test_eval") >= 0.85


def test_source_fits_train_at_least_as_well_as_heldout(bench):
    assert mean(bench, "source_train_eval") >= mean(bench, "source_test_eval") - 0.02


def test_domain_shift_opens_a_gap(bench):
    gap = mean(bench, "source_test_eval") - mean(bench, "direct_test")
    assert gap >= 0.10


def test_distillation_improves_pseudo_model(bench):
    assert mean(bench, "distill_only") - mean(bench, "direct_test") >= 0.02


def test_upper_bound_quality(bench):
    assert mean(bench, "upper_bound_train") >= 0.9
    assert mean(bench, "upper_bound") >= mean(bench, "full")


def test_mlm_training_curve_halved(bench):
    m = bench["metrics"]
    assert m["mlm_loss_final"] < 0.5 * m["mlm_loss_initial"]


def test_uncorrupted_reconstruction_not_worse(bench):
    m = bench["metrics"]
    assert m["mse_r0"] <= m["mse_r_train"]


def test_finetune_beats_skipping_it_on_new_family(bench):
    assert mean(bench, "organb_nofinetune") <= mean(bench, "organb_pipeline")


def test_source_family_support_reduces_to_in_domain(bench):
    assert abs(mean(bench, "inround_support") - mean(bench, "full")) <= 0.05


def test_inpainter_frozen_through_adaptation(bench):
    m = bench["metrics"]
    assert m["mlm_checksum_before_distill"] == m["mlm_checksum_after_distill"]
    assert m["mlm_checksum_before_distill"] == m["mlm_checksum_after_adapt"]
