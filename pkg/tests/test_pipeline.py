import json

import pytest

from urbanmas.backend import MockBackend
from urbanmas.domain import PAIRS, PredictionOutput
from urbanmas.errors import ConfigError
from urbanmas.guidance import guide
from urbanmas.pipeline import (
    load_predictions,
    predict_location,
    run_predictions,
    write_audit,
    write_predictions,
    write_similarity_log,
)

from conftest import make_factor_set


@pytest.fixture
def factor_map(task):
    return {(d, r): make_factor_set(dimension=d, level=r) for d, r in PAIRS}


class TestPredictLocation:
    def test_unknown_variant_is_rejected(self, sample, task):
        with pytest.raises(ConfigError, match="unknown variant"):
            predict_location(sample, task, "fancy", MockBackend())

    def test_guided_variant_without_factor_map_is_rejected(self, sample, task):
        with pytest.raises(ConfigError, match="factor map"):
            predict_location(sample, task, "full", MockBackend())

    def test_full_variant_produces_four_pairs_and_prediction(self, sample, task, factor_map):
        run = predict_location(sample, task, "full", MockBackend(), factor_map=factor_map)
        assert set(run.pairs) == set(PAIRS)
        assert run.prediction.variant == "full"
        assert 0.0 <= run.prediction.value <= 10.0

    def test_single_llm_has_no_pair_transcripts(self, sample, task):
        run = predict_location(sample, task, "single_llm", MockBackend())
        assert run.pairs is None
        assert run.prediction.variant == "single_llm"

    def test_no_factors_uses_generic_placeholders(self, sample, task):
        run = predict_location(sample, task, "no_factors", MockBackend())
        names = next(iter(run.pairs.values())).record.field_names
        assert "overall character" in names


class TestRunPredictions:
    def test_outputs_are_sorted_and_complete(self, dataset, task, factor_map):
        outcome = run_predictions(
            dataset, [task], ("full", "single_llm"), MockBackend(),
            factor_maps={task.id: factor_map},
        )
        keys = [(p.location_id, p.task_id, p.variant) for p in outcome.predictions]
        assert keys == sorted(keys)
        assert len(keys) == len(dataset) * 2
        assert not outcome.failures

    def test_missing_factor_maps_fail_fast(self, dataset, task):
        with pytest.raises(ConfigError, match="factor maps"):
            run_predictions(dataset, [task], ("full",), MockBackend())

    def test_failures_are_collected_not_raised(self, dataset, task):
        backend = MockBackend()
        backend.add_rule(lambda r: "seattle" in r.user_prompt.lower(), "never json")
        outcome = run_predictions(dataset, [task], ("single_llm",), backend)
        assert len(outcome.predictions) == 2
        assert len(outcome.failures) == 1
        assert outcome.failures[0]["location_id"] == "seattle_pike"
        assert "seattle_pike" not in [p.location_id for p in outcome.predictions]


class TestRunArtifacts:
    def _outcome(self, dataset, task, factor_map, backend=None):
        return run_predictions(
            dataset, [task], ("full", "single_llm"), backend or MockBackend(),
            factor_maps={task.id: factor_map},
        )

    def test_predictions_file_round_trip(self, dataset, task, factor_map, tmp_path):
        outcome = self._outcome(dataset, task, factor_map)
        path = tmp_path / "predictions.jsonl"
        write_predictions(outcome.predictions, path)
        assert load_predictions(path) == outcome.predictions

    def test_audit_layout_and_content(self, dataset, task, factor_map, tmp_path):
        outcome = self._outcome(dataset, task, factor_map)
        audit = tmp_path / "audit"
        written = write_audit(outcome, audit)
        assert written == len(outcome.predictions)
        doc = json.loads(
            (audit / "full" / task.id / "tokyo_tower.json").read_text()
        )
        assert set(doc["pairs"]) == {
            "social_macro", "social_street", "environment_macro", "environment_street",
        }
        assert doc["prediction"]["variant"] == "full"
        single = json.loads(
            (audit / "single_llm" / task.id / "tokyo_tower.json").read_text()
        )
        assert "pairs" not in single

    def test_similarity_log_has_one_line_per_settled_record(
        self, dataset, task, factor_map, tmp_path
    ):
        outcome = self._outcome(dataset, task, factor_map)
        path = tmp_path / "similarity.jsonl"
        count = write_similarity_log(outcome, path)
        # full variant only: 4 settled records per location.
        assert count == 4 * len(dataset)
        lines = [json.loads(line) for line in path.read_text().splitlines()]
        assert all("report" in line and "pair" in line for line in lines)

    def test_guided_map_from_guidance_layer_composes(self, dataset, task):
        backend = MockBackend()
        factor_map = guide(task, backend)
        outcome = run_predictions(
            dataset, [task], ("no_reliability",), backend, factor_maps={task.id: factor_map}
        )
        assert len(outcome.predictions) == len(dataset)
        for run in outcome.runs:
            for pe in run.pairs.values():
                assert pe.record.status == "raw"


class TestClampSurfacing:
    def test_clamp_count_reflects_predictions(self, dataset, task):
        backend = MockBackend()
        backend.add_rule(
            lambda r: '"running_amount"' in r.user_prompt,
            json.dumps({"running_amount": 44.0}),
        )
        outcome = run_predictions(dataset, [task], ("single_llm",), backend)
        assert outcome.clamp_count == len(dataset)
        assert all(p.value == 10.0 and p.clamped for p in outcome.predictions)
