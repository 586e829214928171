from pathlib import Path
import logging
import math
import sys

import numpy as np
import pytest

sys.path.append(str(Path(__file__).parent.parent.parent))

# pylint: disable=wrong-import-position,no-name-in-module,import-error
from mmtoolkit.exceptions import UndefinedMetricError
from mmtoolkit.metrics import (BAR_STEPS, Representation, compactness_report, count_tokens,
                               evaluate_scores, groove_consistency, grooves, pitch_class_entropy,
                               scale_consistency, score_seconds, write_compactness_csv)
from mmtoolkit.score import MusicScore, Note


C_MAJOR_PITCHES = (60, 62, 64, 65, 67, 69, 71)


def melody(pitches, step=12, program=0) -> MusicScore:
    return MusicScore([Note(step * index, pitch, step, program)
                       for index, pitch in enumerate(pitches)])


def onsets(bars) -> MusicScore:
    ''' One note per onset position, bar by bar '''
    return MusicScore([Note(BAR_STEPS * bar + position, 60, 1)
                       for bar, positions in enumerate(bars) for position in positions])


def synthetic_corpus(seed: int = 0) -> MusicScore:
    ''' 1000 notes over 64 beats on four instruments '''
    rng = np.random.default_rng(seed)
    programs = (0, 24, 40, 73)
    return MusicScore([Note(int(rng.integers(64 * 12)), int(rng.integers(36, 96)),
                            int(rng.integers(1, 25)), programs[index % 4])
                       for index in range(1000)])


class TestPitchClassEntropy:
    def test_single_class(self):
        assert pitch_class_entropy(melody([60, 72, 48])) == 0.0

    def test_single_class_is_positive_zero(self):
        assert math.copysign(1.0, pitch_class_entropy(melody([60, 72, 48]))) == 1.0
        assert f'{pitch_class_entropy(melody([60])):.6f}' == '0.000000'

    def test_uniform_chromatic(self):
        assert pitch_class_entropy(melody(range(60, 72))) == pytest.approx(math.log2(12),
                                                                           abs=1e-9)

    def test_three_c_one_g(self):
        expected = -(0.75 * math.log2(0.75) + 0.25 * math.log2(0.25))
        assert pitch_class_entropy(melody([60, 48, 72, 67])) == pytest.approx(expected, abs=1e-9)
        assert expected == pytest.approx(0.8113, abs=1e-4)

    def test_transposition_by_octave(self):
        pitches = [60, 64, 67, 67, 70]
        assert pitch_class_entropy(melody(pitches)) == \
            pitch_class_entropy(melody([pitch + 12 for pitch in pitches]))

    def test_raises_if_empty(self):
        with pytest.raises(UndefinedMetricError):
            pitch_class_entropy(MusicScore([]))


class TestScaleConsistency:
    def test_c_major(self):
        assert scale_consistency(melody(C_MAJOR_PITCHES)) == 1.0

    def test_uniform_chromatic(self):
        assert scale_consistency(melody(range(60, 72))) == pytest.approx(7 / 12, abs=1e-12)

    def test_c_major_with_f_sharp(self):
        # Eight pitch classes never fit a seven-note scale
        assert scale_consistency(melody(C_MAJOR_PITCHES + (66,))) == pytest.approx(7 / 8)

    def test_g_major(self):
        assert scale_consistency(melody([60, 62, 64, 66, 67, 69, 71, 72])) == 1.0

    def test_a_minor(self):
        assert scale_consistency(melody([57, 59, 60, 62, 64, 65, 67])) == 1.0

    def test_raises_if_empty(self):
        with pytest.raises(UndefinedMetricError):
            scale_consistency(MusicScore([]))


class TestGrooveConsistency:
    def test_grooves_shape(self):
        patterns = grooves(onsets([[0, 12], [24]]))
        assert patterns.shape == (2, BAR_STEPS)
        assert patterns[0, [0, 12]].all() and patterns[1, 24]
        assert patterns.sum() == 3

    def test_identical_bars(self):
        assert groove_consistency(onsets([[0, 12, 24, 36]] * 4)) == 1.0

    def test_full_then_empty_bar(self):
        score = MusicScore([Note(position, 60, 1) for position in range(BAR_STEPS)]
                           + [Note(2 * BAR_STEPS, 60, 1)])
        # Bars 0 and 1 differ everywhere, bars 1 and 2 on one onset
        assert groove_consistency(score) == pytest.approx(1 - (48 + 1) / 2 / 48, abs=1e-12)

    def test_full_bars(self):
        score = MusicScore([Note(position, 60, 1) for position in range(BAR_STEPS)]
                           + [Note(BAR_STEPS + position, 60, 1) for position in range(BAR_STEPS)])
        assert groove_consistency(score) == 1.0

    def test_hamming_four_then_eight(self):
        score = onsets([[0], range(5), range(13)])
        assert groove_consistency(score) == pytest.approx(0.875, abs=1e-9)

    def test_ignores_note_order_within_bar(self):
        score = onsets([[0, 12, 30], [6, 12]])
        reordered = MusicScore(list(reversed(score.notes)))
        assert groove_consistency(score) == groove_consistency(reordered)

    def test_raises_if_single_bar(self):
        with pytest.raises(UndefinedMetricError):
            groove_consistency(onsets([[0, 12]]))


class TestRepresentation:
    @pytest.mark.parametrize('label,expected', [
        ('mmt', Representation.MMT),
        ('MMM-like', Representation.MMM),
        ('REMI+-like', Representation.REMI),
        ('remi+', Representation.REMI),
    ])
    def test_from_str(self, label, expected):
        assert Representation.from_str(label) == expected

    def test_raises_if_unknown(self):
        with pytest.raises(ValueError):
            Representation.from_str('abc')


class TestCountTokens:
    def test_empty_score(self):
        assert count_tokens(MusicScore([]), Representation.MMT) == 3
        assert count_tokens(MusicScore([]), Representation.REMI) == 2
        assert count_tokens(MusicScore([]), Representation.MMM) == 2

    def test_single_note(self):
        score = MusicScore([Note(0, 60, 12)])
        assert count_tokens(score, Representation.MMT) == 5
        assert count_tokens(score, Representation.REMI) == 7
        assert count_tokens(score, Representation.MMM) == 2 + 3 + 2 + 1

    def test_accepts_label(self):
        assert count_tokens(MusicScore([Note(0, 60, 12)]), 'REMI+-like') == 7

    def test_mmt_count_is_notes_plus_instruments_plus_three(self):
        score = synthetic_corpus(3)
        assert count_tokens(score, Representation.MMT) == 1000 + 4 + 3

    def test_mmm_counts_track_span(self):
        score = MusicScore([Note(0, 60, 12), Note(12 * 3, 62, 12), Note(0, 67, 12, 40)])
        assert count_tokens(score, Representation.MMM) == 2 + (3 + 4 + 4) + (3 + 2 + 1)

    def test_remi_counts_positions_once(self):
        score = MusicScore([Note(0, 60, 12), Note(0, 64, 12), Note(6, 67, 6),
                            Note(BAR_STEPS, 60, 12)])
        assert count_tokens(score, Representation.REMI) == 2 + 2 + 3 + 3 * 4

    def test_compactness_ratio(self):
        score = synthetic_corpus()
        mmt = count_tokens(score, Representation.MMT)
        assert count_tokens(score, Representation.MMM) / mmt >= 2
        assert count_tokens(score, Representation.REMI) / mmt >= 2


class TestEvaluateScores:
    def test_summaries(self):
        scores = [melody(C_MAJOR_PITCHES), melody([60, 72, 48, 60, 62])]
        report = evaluate_scores(scores)
        entropies = [pitch_class_entropy(score) for score in scores]
        assert report.pitch_class_entropy.mean == pytest.approx(np.mean(entropies))
        assert report.pitch_class_entropy.ci == pytest.approx(
            1.96 * np.std(entropies, ddof=1) / math.sqrt(2))
        assert report.scale_consistency.count == 2
        assert len(report.samples) == 2

    def test_skips_undefined_values(self, caplog):
        scores = [melody(C_MAJOR_PITCHES), melody([60, 64])]
        with caplog.at_level(logging.WARNING):
            report = evaluate_scores(scores)
        assert report.groove_consistency.count == 1
        assert report.groove_consistency.ci == 0.0
        assert report.samples[1]['groove_consistency'] is None
        assert 'groove_consistency' in caplog.text

    def test_undefined_everywhere(self):
        report = evaluate_scores([MusicScore([])])
        assert report.pitch_class_entropy is None
        assert 'undefined' in report.summary()

    def test_write_csv(self, tmp_path):
        report = evaluate_scores([melody(C_MAJOR_PITCHES), melody([60])])
        report.write_csv(tmp_path / 'metrics.csv', ['a.mid', 'b.mid'])
        lines = (tmp_path / 'metrics.csv').read_text().splitlines()
        assert lines[0] == 'sample,pitch_class_entropy,scale_consistency,groove_consistency'
        assert lines[2] == 'b.mid,0.000000,1.000000,'


class TestCompactness:
    def test_score_seconds(self):
        assert score_seconds(MusicScore([Note(0, 60, 12), Note(12 * 199, 60, 12)])) == 100.0
        assert score_seconds(MusicScore([])) == 0.0

    def test_report(self, tmp_path):
        entries = compactness_report([synthetic_corpus(1), synthetic_corpus(2)])
        ratios = {entry.representation: entry.ratio_to_mmt for entry in entries}
        assert ratios[Representation.MMT] == 1.0
        assert ratios[Representation.MMM] >= 2 and ratios[Representation.REMI] >= 2
        seconds = {entry.representation: entry.seconds_per_budget for entry in entries}
        assert seconds[Representation.MMT] > seconds[Representation.MMM] > 0

        write_compactness_csv(entries, tmp_path / 'compactness.csv')
        lines = (tmp_path / 'compactness.csv').read_text().splitlines()
        assert lines[0] == 'representation,tokens,ratio_to_mmt,seconds_per_budget'
        assert [line.split(',')[0] for line in lines[1:]] == ['mmt', 'mmm', 'remi']
