import numpy as np
import pytest

from featsent.attacks import DEFAULTS, AttackSpec, craft_dataset, load_adversarial_set, save_adversarial_set
from featsent.errors import ProvenanceError


def test_defaults_follow_hyperparameter_table():
    assert DEFAULTS["fgsm"] == {"eps": 0.1}
    assert DEFAULTS["pgd"]["alpha"] == 0.002 and DEFAULTS["pgd"]["iters"] == 10
    assert DEFAULTS["deepfool"]["max_iter"] == 50 and DEFAULTS["deepfool"]["overshoot"] == 0.02
    assert DEFAULTS["cw"]["binary_search_steps"] == 5 and DEFAULTS["cw"]["confidence"] == 0.8
    assert DEFAULTS["ead"]["binary_search_steps"] == 9 and DEFAULTS["ead"]["decision_rule"] == "L1"
    assert DEFAULTS["jsma"] == {"theta": 1.0, "gamma": 0.1}


@pytest.mark.parametrize(
    "attack, params",
    [
        ("square", {}),
        ("fgsm", {"eps": -0.1}),
        ("pgd", {"alpha": 0.1}),
        ("pgd", {"iters": 0}),
        ("jsma", {"gamma": 1.5}),
        ("adaptive_comb", {"sigma": 2.0}),
        ("fgsm", {"epsilon": 0.1}),
    ],
)
def test_spec_validation(attack, params):
    with pytest.raises(ValueError):
        AttackSpec(attack, params)


def test_spec_merges_defaults_and_hash_tracks_params():
    a, b = AttackSpec("pgd"), AttackSpec("pgd", {"iters": 20})
    assert a.params["eps"] == pytest.approx(8 / 255) and b.params["iters"] == 20
    assert a.hash() != b.hash() and AttackSpec.from_dict(a.to_dict()).hash() == a.hash()


def test_crafting_is_deterministic(tiny_classifier, synthetic):
    spec = AttackSpec("pgd", {"iters": 3}, seed=4)
    x, y = synthetic.images[:40], synthetic.labels[:40]
    a = craft_dataset(tiny_classifier, spec, x, y, batch_size=16)
    b = craft_dataset(tiny_classifier, spec, x, y, batch_size=16)
    assert np.array_equal(a.perturbed, b.perturbed)
    c = craft_dataset(tiny_classifier, AttackSpec("pgd", {"iters": 3}, seed=5), x, y, batch_size=16)
    assert not np.array_equal(a.perturbed, c.perturbed)


def test_empty_input_rejected(tiny_classifier, synthetic):
    with pytest.raises(ValueError):
        craft_dataset(tiny_classifier, AttackSpec("fgsm"), synthetic.images[:0], synthetic.labels[:0])


def test_fgsm_success_flags_and_rate(tiny_classifier, synthetic):
    adv = craft_dataset(tiny_classifier, AttackSpec("fgsm", {"eps": 0.1}), synthetic.images[500:600], synthetic.labels[500:600])
    assert np.array_equal(adv.success, adv.predictions != adv.true_labels)
    assert np.abs(adv.perturbed - adv.originals).max() <= 0.1 + 1e-6
    assert adv.success_rate > 0.5


def test_round_trip_and_provenance(tmp_path, tiny_classifier, synthetic):
    adv = craft_dataset(
        tiny_classifier, AttackSpec("deepfool", {"max_iter": 5}), synthetic.images[:10], synthetic.labels[:10],
        classifier_hash="abc",
    )
    save_adversarial_set(adv, tmp_path / "df")
    back = load_adversarial_set(tmp_path / "df")
    assert np.array_equal(back.perturbed, adv.perturbed) and np.array_equal(back.success, adv.success)
    assert back.spec.to_dict() == adv.spec.to_dict() and back.classifier_hash == "abc"
    back.check_classifier("abc")
    with pytest.raises(ProvenanceError):
        back.check_classifier("other")


def test_targeted_attack_defaults_to_second_likely(tiny_classifier, synthetic):
    adv = craft_dataset(tiny_classifier, AttackSpec("jsma", {"gamma": 0.02}), synthetic.images[:4], synthetic.labels[:4])
    assert adv.perturbed.shape == (4, 3, 32, 32)
    # JSMA only ever raises features
    assert np.all(adv.perturbed >= adv.originals - 1e-7)
