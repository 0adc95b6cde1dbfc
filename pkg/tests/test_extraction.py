import json

import pytest

from urbanmas.backend import MockBackend, RecordingBackend, ReplayBackend
from urbanmas.domain import Dimension, Level, PAIRS, pair_label
from urbanmas.errors import ExtractionError, ExtractionParseError
from urbanmas.extraction import (
    MAX_FIELD_CHARS,
    build_prompt,
    extract_pair,
    extract_reliable,
    extract_single,
    extract_variants,
)
from urbanmas.reliability import ReliabilityConfig

from conftest import FACTOR_NAMES, make_factor_set, scripted_extraction_backend


def _values(suffix: str = "") -> dict[str, str]:
    return {name: f"moderate {name} around the area{suffix}" for name in FACTOR_NAMES}


class TestBuildPrompt:
    def test_rendering_is_deterministic(self, sample):
        fs = make_factor_set()
        assert build_prompt(sample, fs) == build_prompt(sample, fs)

    def test_user_prompt_contains_all_factor_names(self, sample):
        prompt = build_prompt(sample, make_factor_set())
        for name in FACTOR_NAMES:
            assert name in prompt.user

    def test_macro_prompts_never_carry_imagery(self, sample):
        fs = make_factor_set(level=Level.MACRO)
        assert build_prompt(sample, fs).image_refs == ()

    def test_street_prompts_carry_imagery_when_available(self, sample):
        fs = make_factor_set(level=Level.STREET)
        assert build_prompt(sample, fs).image_refs == sample.streetview_refs

    def test_poi_digest_is_truncated_closest_first(self, sample):
        prompt = build_prompt(sample, make_factor_set(), max_pois=2)
        assert "Tokyo Tower" in prompt.user
        assert "Zojoji Temple" in prompt.user
        assert "Shiba Park" not in prompt.user
        assert prompt.user.index("Tokyo Tower") < prompt.user.index("Zojoji Temple")


class TestExtractVariants:
    def test_two_records_with_matching_keys(self, sample):
        backend = scripted_extraction_backend({0: _values(), 1: _values(" alt")})
        fs = make_factor_set()
        var_a, var_b = extract_variants(sample, fs, backend)
        assert var_a.field_names == var_b.field_names == fs.factor_names
        assert var_a.status == var_b.status == "raw"
        assert {v.provenance for v in var_a.fields.values()} == {"variant_a"}
        assert {v.provenance for v in var_b.fields.values()} == {"variant_b"}
        assert backend.call_count == 2

    def test_missing_key_triggers_one_reask(self, sample):
        fs = make_factor_set()
        incomplete = {k: v for k, v in _values().items() if k != FACTOR_NAMES[0]}
        backend = MockBackend()
        backend.add_rule(
            lambda r: r.variant_seed == 1 and "unusable" in r.user_prompt,
            json.dumps(_values()),
        )
        backend.add_rule(lambda r: r.variant_seed == 1, json.dumps(incomplete))
        backend.add_rule(lambda r: r.variant_seed == 0, json.dumps(_values()))
        var_a, var_b = extract_variants(sample, fs, backend)
        assert backend.call_count == 3
        assert var_b.fields[FACTOR_NAMES[0]].text

    def test_unparseable_twice_names_the_agent(self, sample):
        fs = make_factor_set(dimension=Dimension.BUILT_ENVIRONMENTAL, level=Level.STREET)
        backend = MockBackend()
        backend.add_rule(lambda r: True, "no json here")
        with pytest.raises(ExtractionParseError, match="environment_street"):
            extract_variants(sample, fs, backend)
        assert backend.call_count == 2  # one ask + one re-ask for variant A

    def test_blank_value_counts_as_missing(self, sample):
        fs = make_factor_set()
        blanks = dict(_values(), **{FACTOR_NAMES[2]: "  "})
        backend = MockBackend()
        backend.add_rule(lambda r: "unusable" in r.user_prompt, json.dumps(_values()))
        backend.add_rule(lambda r: True, json.dumps(blanks))
        var_a, _ = extract_variants(sample, fs, backend)
        assert var_a.fields[FACTOR_NAMES[2]].text.strip()

    def test_values_are_capped(self, sample):
        fs = make_factor_set()
        oversized = dict(_values(), **{FACTOR_NAMES[0]: "x" * 1000})
        backend = scripted_extraction_backend({0: oversized, 1: oversized})
        var_a, _ = extract_variants(sample, fs, backend)
        assert len(var_a.fields[FACTOR_NAMES[0]].text) == MAX_FIELD_CHARS


class TestExtractSingle:
    def test_one_call_and_raw_passthrough(self, sample):
        backend = scripted_extraction_backend({0: _values()})
        record = extract_single(sample, make_factor_set(), backend)
        assert backend.call_count == 1
        assert record.status == "raw"
        assert {v.provenance for v in record.fields.values()} == {"variant_a"}


class TestExtractPair:
    def test_identical_variants_settle_stable_without_refines(self, sample):
        backend = scripted_extraction_backend({0: _values(), 1: _values()})
        result = extract_pair(sample, make_factor_set(), backend, ReliabilityConfig())
        assert result.record.status == "stable"
        assert result.refine_calls == 0
        assert backend.call_count == 2

    def test_corrupted_field_gets_exactly_one_targeted_refine(self, sample):
        target = FACTOR_NAMES[4]
        values_b = dict(_values(), **{target: "entirely unrelated construction hoarding text"})
        backend = scripted_extraction_backend({0: _values(), 1: values_b})
        refine_prompts = []

        def observe(r):  # never matches; records refine traffic on the way through
            if "Value A:" in r.user_prompt:
                refine_prompts.append(r.user_prompt)
            return False

        backend.add_rule(observe, "unused")
        result = extract_pair(sample, make_factor_set(), backend, ReliabilityConfig())
        assert result.record.status == "refined"
        assert result.refine_calls == 1
        assert result.report.conflicting == {target}
        assert len(refine_prompts) == 1
        assert f"Factor: {target}" in refine_prompts[0]
        assert backend.call_count == 3


class TestExtractReliable:
    def _factor_map(self):
        return {
            (d, r): make_factor_set(dimension=d, level=r) for d, r in PAIRS
        }

    def test_four_records_with_factor_keys(self, sample):
        backend = scripted_extraction_backend({0: _values(), 1: _values()})
        results = extract_reliable(sample, self._factor_map(), backend)
        assert set(results) == set(PAIRS)
        for pair, pe in results.items():
            assert pe.record.field_names == FACTOR_NAMES
            assert pe.record.status == "stable"
        assert backend.call_count == 8

    def test_reliability_disabled_is_single_variant_raw(self, sample):
        backend = scripted_extraction_backend({0: _values()})
        results = extract_reliable(
            sample, self._factor_map(), backend, reliability_enabled=False
        )
        assert backend.call_count == 4
        for pe in results.values():
            assert pe.record.status == "raw"
            assert pe.variant_b is None
            assert pe.report is None

    def test_missing_factor_map_pair_is_an_error(self, sample):
        backend = scripted_extraction_backend({0: _values(), 1: _values()})
        partial = {pair: make_factor_set(dimension=pair[0], level=pair[1]) for pair in PAIRS[:2]}
        with pytest.raises(ExtractionError, match="missing pairs"):
            extract_reliable(sample, partial, backend)

    def test_child_errors_are_labeled_by_pair(self, sample):
        backend = MockBackend()
        backend.add_rule(lambda r: "street level" in r.system_prompt, "garbage")
        backend.add_rule(lambda r: True, json.dumps(_values()))
        with pytest.raises(ExtractionError) as err:
            extract_reliable(sample, self._factor_map(), backend)
        assert "street" in str(err.value)

    def test_replay_is_byte_identical_across_runs(self, sample, tmp_path):
        cassette = tmp_path / "cassette.jsonl"
        recorder = RecordingBackend(MockBackend(), cassette)
        factor_map = self._factor_map()
        recorded = extract_reliable(sample, factor_map, recorder)

        replays = [
            extract_reliable(sample, factor_map, ReplayBackend(cassette), workers=w)
            for w in (1, 4)
        ]
        as_json = lambda results: json.dumps(
            {pair_label(*pair): pe.to_dict() for pair, pe in sorted(results.items(), key=str)},
            sort_keys=True,
        )
        assert as_json(replays[0]) == as_json(replays[1]) == as_json(recorded)
