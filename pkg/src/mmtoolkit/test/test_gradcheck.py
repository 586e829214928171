from pathlib import Path
import sys

import pytest
import torch

sys.path.append(str(Path(__file__).parent.parent.parent))

# pylint: disable=wrong-import-position,no-name-in-module,import-error
from mmtoolkit.models.gradcheck import GradCheckReport, grad_check, relative_error
from mmtoolkit.models.transformer import ModelConfig, MultitrackTransformer


DESK_CONFIG = ModelConfig(layers=2, model_dim=16, heads=4, max_len=8, dropout=0.0)


class TestRelativeError:
    def test_identical_gradients(self):
        assert relative_error(torch.ones(3), torch.ones(3)) == 0.0

    def test_both_zero(self):
        assert relative_error(torch.zeros(3), torch.zeros(3)) == 0.0

    def test_opposite_gradients(self):
        assert relative_error(torch.ones(3), -torch.ones(3)) == pytest.approx(1.0)


class TestGradCheckReport:
    def test_empty_report_passes(self):
        report = GradCheckReport({}, 1e-4)
        assert report.passed
        assert report.max_error == 0.0
        assert report.worst_array is None

    def test_names_failed_arrays(self):
        report = GradCheckReport({'a': 1e-7, 'b': 0.5}, 1e-4)
        assert not report.passed
        assert report.failed_arrays == ['b']
        assert report.worst_array == 'b'
        assert 'FAIL (b)' in str(report)


class TestGradCheck:
    def test_no_arrays_is_vacuous_pass(self):
        report = grad_check(DESK_CONFIG, arrays=[])
        assert report.passed
        assert not report.errors

    def test_sampled_entries_pass(self):
        report = grad_check(DESK_CONFIG, max_entries=16)
        assert report.passed, str(report)
        names = [name for name, _ in MultitrackTransformer(DESK_CONFIG).named_parameters()]
        assert list(report.errors) == names

    def test_corrupted_head_gradient_fails(self):
        def corrupt(name, gradient):
            return -gradient if name == 'field_heads.3.weight' else gradient

        arrays = ['field_heads.3.weight', 'field_heads.3.bias']
        report = grad_check(DESK_CONFIG, arrays=arrays, max_entries=20, tamper=corrupt)
        assert report.failed_arrays == ['field_heads.3.weight']

    @pytest.mark.slow
    def test_every_entry_passes(self):
        report = grad_check(DESK_CONFIG, length=6)
        assert report.max_error < 1e-4, str(report)
