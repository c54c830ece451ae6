from dataclasses import replace

import numpy as np
import pytest
import torch

from lesionsynth.data import TOY_CLASSES, DatasetManifest, stratified_kfold
from lesionsynth.harness import (
    REGISTRY,
    ExperimentConfig,
    HarnessConfigError,
    LabelMappingError,
    LeakageError,
    audit_leakage,
    compare_conditions,
    map_labels,
    run_classification,
    run_robustness,
    run_segmentation,
    training_manifest,
)
from lesionsynth.metrics import MetricReport


def _cls_cfg(**kw):
    base = dict(input_size=32, batch_size=16, epochs=2, lr=1e-3, folds=2, augment=False)
    return ExperimentConfig.for_task("classification", "tiny-cnn", **{**base, **kw})


def _seg_cfg(**kw):
    base = dict(input_size=32, batch_size=8, epochs=2, lr=1e-3, folds=2, augment=False)
    return ExperimentConfig.for_task("segmentation", "tiny-unet", **{**base, **kw})


@pytest.fixture(scope="module")
def cls_result(toy_manifest, synth_manifest):
    return run_classification(_cls_cfg(), {"real": toy_manifest, "synth": synth_manifest})


class TestConfig:
    def test_task_defaults(self):
        c = ExperimentConfig.for_task("classification", "densenet121")
        assert (c.input_size, c.batch_size, c.epochs, c.lr) == (224, 32, 50, 1e-4)
        s = ExperimentConfig.for_task("segmentation", "tiny-unet")
        assert (s.input_size, s.batch_size, s.epochs, s.lr) == (512, 8, 20, 1e-3)
        assert c.folds == 5

    def test_invalid(self):
        with pytest.raises(HarnessConfigError):
            _cls_cfg(condition="mixed")
        with pytest.raises(HarnessConfigError):
            _cls_cfg(folds=1)
        with pytest.raises(HarnessConfigError):
            ExperimentConfig.for_task("detection", "x")

    def test_registry(self):
        assert {"tiny-cnn", "densenet121", "resnet34", "squeezenet1_1", "swin_t"} <= set(REGISTRY.names("classification"))
        assert "tiny-unet" in REGISTRY.names("segmentation")
        with pytest.raises(HarnessConfigError):
            REGISTRY.build("tiny-unet", "classification", 2, 32)
        out = REGISTRY.build("tiny-unet", "segmentation", 1, 32)(torch.zeros(2, 3, 32, 32))
        assert out.shape == (2, 1, 32, 32)


class TestComposition:
    def test_sizes_per_condition(self, toy_manifest, synth_manifest):
        train, test = stratified_kfold(toy_manifest, 3, 0)[0]
        n = len(train)
        assert training_manifest("real", train, synth_manifest, 0) is train
        s = training_manifest("synth", train, synth_manifest, 0)
        h = training_manifest("hybrid", train, synth_manifest, 0)
        assert len(s) == len(h) == n
        assert all(r.source == "synthetic" for r in s.records)
        assert sum(r.source == "real" for r in h.records) == n // 2
        for m in (s, h):
            assert not audit_leakage(m, test)

    def test_needs_synth(self, toy_manifest):
        with pytest.raises(HarnessConfigError):
            training_manifest("synth", toy_manifest, None, 0)

    def test_leakage_detected(self, toy_manifest):
        assert audit_leakage(toy_manifest, toy_manifest) == set(toy_manifest.ids())


class TestClassification:
    def test_report_shape(self, cls_result, toy_manifest):
        r = cls_result.report
        assert r.kind == "table2_cls" and len(r.rows) == 1
        row = r.rows[0]
        assert row["Models"] == "tiny-cnn" and row["Train Dataset"] == "Real only"
        for c in ("Accuracy", "Sensitivity", "Precision", "F1score"):
            assert 0.0 <= row[c] <= 100.0
        assert len(cls_result.models) == 2 and len(cls_result.fold_metrics) == 2
        assert sum(fm["n_test"] for fm in cls_result.fold_metrics) == len(toy_manifest)

    def test_test_folds_are_real_and_disjoint(self, cls_result):
        seen = set()
        for train, test in cls_result.folds:
            assert all(r.source == "real" for r in test.records)
            assert not audit_leakage(train, test)
            assert not seen & set(test.ids())
            seen |= set(test.ids())

    def test_deterministic(self, cls_result, toy_manifest, synth_manifest):
        again = run_classification(_cls_cfg(), {"real": toy_manifest, "synth": synth_manifest})
        assert again.report.rows == cls_result.report.rows
        for a, b in zip(again.folds, cls_result.folds):
            assert a[1].ids() == b[1].ids()

    def test_synth_condition(self, toy_manifest, synth_manifest):
        res = run_classification(_cls_cfg(condition="synth", epochs=1), {"real": toy_manifest, "synth": synth_manifest})
        assert res.report.rows[0]["Train Dataset"] == "Synth only"
        for train, _ in res.folds:
            assert all(r.source == "synthetic" for r in train.records)

    def test_wrong_task(self, toy_manifest):
        with pytest.raises(HarnessConfigError):
            run_classification(_seg_cfg(), {"real": toy_manifest})
        with pytest.raises(HarnessConfigError):
            run_classification(_cls_cfg(), {"synth": toy_manifest})

    def test_leaky_synthetic_set_rejected(self, toy_manifest):
        # synthetic records that reuse real identifiers must never reach training
        leaky = DatasetManifest(tuple(replace(r, source="synthetic") for r in toy_manifest.records), toy_manifest.label_set, toy_manifest.root)
        with pytest.raises(LeakageError):
            run_classification(_cls_cfg(condition="synth", epochs=1), {"real": toy_manifest, "synth": leaky})


class TestRobustness:
    def test_internal_set_equals_direct_evaluation(self, cls_result, toy_manifest):
        from lesionsynth.harness import evaluate_classifier, load_arrays

        rep = run_robustness(_cls_cfg(), toy_manifest, cls_result)
        assert rep.kind == "table3_cls" and rep.rows[0]["Dataset"] == "Real"
        d = load_arrays(toy_manifest, 32)
        direct = np.mean([evaluate_classifier(tm, d)["accuracy"] for tm in cls_result.models]) * 100
        assert rep.rows[0]["Accuracy"] == pytest.approx(direct, abs=1e-9)

    def test_label_mapping(self, cls_result, toy_manifest):
        renamed = DatasetManifest(
            tuple(replace(r, category={"melanoma": "MEL", "nevus": "NV"}[r.category]) for r in toy_manifest.records),
            ("MEL", "NV"),
            toy_manifest.root,
        )
        with pytest.raises(LabelMappingError) as exc:
            run_robustness(_cls_cfg(), renamed, cls_result)
        assert exc.value.unmapped == ["MEL", "NV"]
        with pytest.raises(LabelMappingError):
            map_labels(renamed, TOY_CLASSES, {"MEL": "melanoma"})
        a = run_robustness(_cls_cfg(), renamed, cls_result, {"MEL": "melanoma", "NV": "nevus"})
        b = run_robustness(_cls_cfg(), toy_manifest, cls_result)
        assert a.rows == b.rows


class TestSegmentation:
    def test_report_and_robustness(self, toy_manifest):
        res = run_segmentation(_seg_cfg(), {"real": toy_manifest})
        row = res.report.rows[0]
        assert res.report.kind == "table2_seg"
        assert 0 <= row["Dice"] <= 100 and row["IoU"] <= row["Dice"] + 1e-9
        for fm in res.fold_metrics:
            assert fm["asd_undefined"] == fm["hd_undefined"]
        rep = run_robustness(_seg_cfg(), toy_manifest, res)
        assert rep.kind == "table3_seg" and set(rep.rows[0]) == {"Models", "Dataset", "Dice", "IoU"}


class TestCompare:
    def _rep(self, ds, acc):
        row = {"Models": "m", "Train Dataset": ds, "Accuracy": acc, "Sensitivity": 50.0, "Precision": 50.0, "F1score": 50.0}
        return MetricReport("table2_cls", [row])

    def test_identical_zero_deltas(self):
        c = compare_conditions([self._rep("Real only", 70.0), self._rep("Real only", 70.0)])
        assert all(d[m] == 0.0 for d in c.deltas for m in ("Accuracy", "Sensitivity", "Precision", "F1score"))

    def test_delta_is_difference(self):
        c = compare_conditions([self._rep("Real only", 70.0), self._rep("50%Real+50%Synth", 75.5)], baseline="Real only")
        assert c.deltas[1]["Accuracy"] == pytest.approx(5.5)
        text = c.render()
        assert "+5.500" in text and "**75.500**" in text

    def test_mismatched_kinds(self):
        other = MetricReport("table3_seg", [{"Models": "m", "Dataset": "Real", "Dice": 1.0, "IoU": 1.0}])
        with pytest.raises(ValueError):
            compare_conditions([self._rep("Real only", 1.0), other])
        with pytest.raises(ValueError):
            compare_conditions([self._rep("Real only", 1.0)])
        with pytest.raises(ValueError):
            compare_conditions([self._rep("Real only", 1.0), self._rep("Synth only", 1.0)], baseline="nope")


def test_tiny_segmenter_learns_toy_lesions(toy_manifest):
    res = run_segmentation(_seg_cfg(epochs=10, augment=True), {"real": toy_manifest})
    assert res.report.rows[0]["Dice"] >= 80.0


def test_hybrid_report_has_four_metrics(toy_manifest, synth_manifest):
    res = run_classification(_cls_cfg(condition="hybrid", epochs=1), {"real": toy_manifest, "synth": synth_manifest})
    row = res.report.rows[0]
    assert row["Train Dataset"] == "50%Real+50%Synth"
    assert all(isinstance(row[c], float) for c in ("Accuracy", "Sensitivity", "Precision", "F1score"))
    assert set(res.report.extra["std"]) == {"Accuracy", "Sensitivity", "Precision", "F1score"}
