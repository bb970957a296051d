import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from desta.description_schema import (
    AudioDescription,
    Bare,
    EmptyDocument,
    InvariantViolation,
    KeyValue,
    MalformedTimestamp,
    MissingSpan,
    Segment,
    Timestamp,
    UnbalancedParentheses,
    build_description,
    parse_description,
    record_warnings,
    serialize_description,
    validate_description,
)
from support import random_description


class TestTimestamp:
    def test_render_under_an_hour(self):
        assert Timestamp(0).render() == "00:00"
        assert Timestamp(65).render() == "01:05"
        assert Timestamp(3599).render() == "59:59"

    def test_render_switches_to_hours(self):
        assert Timestamp(3600).render() == "01:00:00"
        assert Timestamp(3661).render() == "01:01:01"

    def test_parse_inverts_render(self):
        for seconds in [0, 1, 59, 60, 3599, 3600, 3661, 86400]:
            ts = Timestamp(seconds)
            assert Timestamp.parse(ts.render()) == ts

    def test_rejects_out_of_range_fields(self):
        with pytest.raises(ValueError):
            Timestamp.parse("00:75")
        with pytest.raises(ValueError):
            Timestamp.parse("1:75:00")

    def test_accepts_unbounded_leading_field(self):
        assert Timestamp.parse("90:00").seconds == 5400


class TestParse:
    def test_speech_example(self):
        d = parse_description("[00:00-00:05] Hello world (Gender:Female, Emotion:Happy)")
        (seg,) = d.segments
        assert seg.start.seconds == 0 and seg.end.seconds == 5
        assert seg.content == "Hello world"
        assert seg.attributes == (KeyValue("Gender", "Female"), KeyValue("Emotion", "Happy"))

    def test_speech_example_verbatim_ellipsis(self):
        # The trailing ellipsis is literal value text.
        d = parse_description("[00:00-00:05] Hello world (Gender:Female, Emotion:Happy...)")
        assert d.segments[0].attributes[1] == KeyValue("Emotion", "Happy...")

    def test_sound_example(self):
        d = parse_description("[00:00-00:10] (A dog barking)")
        (seg,) = d.segments
        assert seg.content == ""
        assert seg.attributes == (Bare("A dog barking"),)

    def test_degenerate_empty_segment(self):
        d = parse_description("[00:00-00:00]")
        (seg,) = d.segments
        assert seg.start.seconds == seg.end.seconds == 0
        assert seg.content == "" and seg.attributes == ()

    def test_multi_segment_lines(self):
        d = parse_description("[00:00-00:05] one\n[00:06-00:09] two (x:y)")
        assert len(d.segments) == 2
        assert d.segments[1].content == "two"

    def test_non_trailing_group_is_content(self):
        d = parse_description("[00:00-00:05] keep (this) text")
        assert d.segments[0].content == "keep (this) text"
        assert d.segments[0].attributes == ()

    def test_malformed_header_reports_line(self):
        with pytest.raises(MalformedTimestamp) as err:
            parse_description("[00:00-00:05] fine\nnot a header")
        assert err.value.line == 2

    def test_unbalanced_reports_line(self):
        with pytest.raises(UnbalancedParentheses) as err:
            parse_description("[00:00-00:05] broken (group")
        assert err.value.line == 1

    def test_empty_document(self):
        with pytest.raises(EmptyDocument):
            parse_description("")
        with pytest.raises(EmptyDocument):
            parse_description("  \n \n")


class TestSerialize:
    def test_canonical_speech_line(self):
        seg = Segment(Timestamp(0), Timestamp(5), "Hello world", (KeyValue("Gender", "Female"),))
        assert serialize_description(AudioDescription((seg,))) == (
            "[00:00-00:05] Hello world (Gender:Female)"
        )

    def test_hour_threshold(self):
        seg = Segment(Timestamp(3661), Timestamp(3662))
        assert serialize_description(AudioDescription((seg,))) == "[01:01:01-01:01:02]"

    def test_escapes_reserved_characters(self):
        seg = Segment(
            Timestamp(0), Timestamp(1), "a(b):c,",
            (KeyValue("k:ey", "v,a(l)ue"), Bare("ev(ent)")),
        )
        text = serialize_description(AudioDescription((seg,)))
        assert parse_description(text) == AudioDescription((seg,))

    def test_rejects_invalid(self):
        seg = Segment(Timestamp(5), Timestamp(1))
        with pytest.raises(InvariantViolation):
            serialize_description(AudioDescription((seg,)))


class TestValidate:
    def test_valid_is_empty(self):
        d = parse_description("[00:00-00:05] hi")
        assert validate_description(d) == []

    def test_end_before_start(self):
        d = AudioDescription((Segment(Timestamp(5), Timestamp(1)),))
        (violation,) = validate_description(d)
        assert violation.rule == "end before start" and violation.segment_index == 0

    def test_non_monotonic_starts(self):
        d = AudioDescription(
            (
                Segment(Timestamp(10), Timestamp(20)),
                Segment(Timestamp(5), Timestamp(30)),
            )
        )
        (violation,) = validate_description(d)
        assert violation.rule == "non-monotonic starts" and violation.segment_index == 1

    def test_empty_name_and_ambiguous_bares(self):
        d = AudioDescription(
            (
                Segment(
                    Timestamp(0), Timestamp(1), "",
                    (KeyValue("", "x"), ),
                ),
                Segment(
                    Timestamp(0), Timestamp(1), "",
                    (Bare("one"), Bare("two")),
                ),
            )
        )
        rules = {v.rule for v in validate_description(d)}
        assert "empty attribute name" in rules
        assert "ambiguous attribute list" in rules


class TestBuild:
    def test_speech_record(self):
        record = {
            "segments": [
                {
                    "start_s": 0,
                    "end_s": 5,
                    "content": "Hello world",
                    "attributes": {"Gender": "Female"},
                }
            ]
        }
        d = build_description(record)
        assert serialize_description(d) == "[00:00-00:05] Hello world (Gender:Female)"

    def test_event_record(self):
        record = {"segments": [{"start_s": 0, "end_s": 10, "event": "A dog barking"}]}
        assert serialize_description(build_description(record)) == "[00:00-00:10] (A dog barking)"

    def test_escaped_value_round_trips(self):
        record = {
            "segments": [
                {"start_s": 0, "end_s": 5, "content": "x",
                 "attributes": {"Emotion": "Happy, excited"}}
            ]
        }
        d = build_description(record)
        text = serialize_description(d)
        assert "Happy\\, excited" in text
        assert parse_description(text) == d

    def test_missing_span(self):
        with pytest.raises(MissingSpan):
            build_description({"segments": [{"end_s": 5}]})

    def test_fractional_seconds_floored_with_warning(self):
        record = {"segments": [{"start_s": 1.7, "end_s": 5.2}]}
        d = build_description(record)
        assert d.segments[0].start.seconds == 1 and d.segments[0].end.seconds == 5
        assert len(record_warnings(record)) == 2


class TestRoundTripProperties:
    def test_seeded_corpus_round_trip(self):
        rng = np.random.default_rng(20240811)
        for _ in range(300):
            d = random_description(rng)
            assert validate_description(d) == []
            text = serialize_description(d)
            assert parse_description(text) == d
            assert serialize_description(parse_description(text)) == text

    def test_locality_of_attribute_edits(self):
        rng = np.random.default_rng(7)
        d = random_description(rng)
        while len(d.segments) < 2:
            d = random_description(rng)
        lines = serialize_description(d).split("\n")
        # Rewrite segment 0's attributes; every other line must be untouched.
        edited = AudioDescription(
            (
                Segment(
                    d.segments[0].start,
                    d.segments[0].end,
                    d.segments[0].content,
                    (KeyValue("Edited", "yes"),),
                ),
            )
            + d.segments[1:]
        )
        edited_lines = serialize_description(edited).split("\n")
        assert edited_lines[1:] == lines[1:]

    @settings(max_examples=300, deadline=None)
    @given(st.text(max_size=60))
    def test_error_totality(self, text):
        try:
            parse_description(text)
        except (MalformedTimestamp, UnbalancedParentheses, EmptyDocument) as exc:
            assert isinstance(exc.line, int) and exc.line >= 1

    @settings(max_examples=200, deadline=None)
    @given(
        st.text(
            alphabet="ab ():,\\[]0123456789-",
            max_size=40,
        )
    )
    def test_idempotence_on_parseable_inputs(self, suffix):
        text = "[00:00-00:05]" + suffix
        try:
            first = parse_description(text)
        except (MalformedTimestamp, UnbalancedParentheses, EmptyDocument):
            return
        once = serialize_description(first)
        assert parse_description(once) == first
        assert serialize_description(parse_description(once)) == once
