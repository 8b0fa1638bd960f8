"""Dataset-level evaluation and report rendering."""

import numpy as np
import pytest
import torch

from diffuda.dataio import load_mask
from diffuda.diffusion import build_schedule
from diffuda.evaluation import (EvalReport, evaluate, read_report_sidecar,
                                render_table, write_report_sidecar)
from diffuda.exceptions import DataError
from diffuda.features import FeatureSpec
from diffuda.synth import SegSample, SynthConfig, generate_synthetic
from diffuda.unet import DenoiserUNet


@pytest.fixture(scope="module")
def setup():
    torch.manual_seed(0)
    denoiser = DenoiserUNet(in_channels=3, base_width=4, levels=2, blocks_per_level=2)
    schedule = build_schedule(300, 1e-4, 0.02)
    spec = FeatureSpec(blocks=(1, 4), timesteps=(50,), target_resolution=(32, 32))
    samples = generate_synthetic(SynthConfig(count=3, resolution=(32, 32), seed=5))
    return denoiser, schedule, spec, samples


class GroundTruthSegmentor:
    """Oracle emitting the true label of whichever sample is being scored."""

    def __init__(self, samples):
        self.by_shape = samples
        self.cursor = 0

    def __call__(self, features, dropout_active=False, rng=None):
        sample = self.by_shape[self.cursor]
        self.cursor += 1
        probs = torch.tensor(
            np.stack([sample.label.disc, sample.label.cup]).astype(np.float32))
        return probs, torch.zeros(1, *sample.label.disc.shape)


class TestEvaluate:
    def test_oracle_segmentor_scores_one(self, setup):
        denoiser, schedule, spec, samples = setup
        ordered = sorted(samples, key=lambda s: s.id)
        report = evaluate(GroundTruthSegmentor(ordered), denoiser, schedule, spec,
                          samples)
        assert report.dice_disc == 1.0
        assert report.dice_cup == 1.0
        assert report.n == 3

    def test_means_match_independent_recomputation(self, setup):
        denoiser, schedule, spec, samples = setup
        torch.manual_seed(1)
        from diffuda.segmentor import Segmentor
        seg = Segmentor(in_channels=12, widths=(8, 8, 8), dropout_rate=0.0)
        report = evaluate(seg, denoiser, schedule, spec, samples)
        assert report.dice_disc == pytest.approx(
            np.mean([d for _, d, _ in report.per_sample]), abs=1e-9)
        assert report.dice_cup == pytest.approx(
            np.mean([c for _, _, c in report.per_sample]), abs=1e-9)

    def test_removing_a_sample_shifts_mean_arithmetically(self, setup):
        denoiser, schedule, spec, samples = setup
        ordered = sorted(samples, key=lambda s: s.id)
        full = evaluate(GroundTruthSegmentor(ordered), denoiser, schedule, spec, samples)
        subset = samples[:2]
        sub_ordered = sorted(subset, key=lambda s: s.id)
        part = evaluate(GroundTruthSegmentor(sub_ordered), denoiser, schedule, spec, subset)
        kept = {s.id for s in subset}
        expect = np.mean([d for sid, d, _ in full.per_sample if sid in kept])
        assert part.dice_disc == pytest.approx(expect, abs=1e-9)

    def test_rejects_unlabeled(self, setup):
        denoiser, schedule, spec, samples = setup
        bad = samples + [SegSample(image=samples[0].image, label=None,
                                   domain="target", id="x")]
        with pytest.raises(DataError):
            evaluate(None, denoiser, schedule, spec, bad)

    def test_deterministic_across_reruns(self, setup):
        denoiser, schedule, spec, samples = setup
        torch.manual_seed(2)
        from diffuda.segmentor import Segmentor
        seg = Segmentor(in_channels=12, widths=(8, 8, 8), dropout_rate=0.5)
        a = evaluate(seg, denoiser, schedule, spec, samples)
        b = evaluate(seg, denoiser, schedule, spec, samples)
        assert a.per_sample == b.per_sample

    def test_prediction_dump(self, setup, tmp_path):
        denoiser, schedule, spec, samples = setup
        ordered = sorted(samples, key=lambda s: s.id)
        evaluate(GroundTruthSegmentor(ordered), denoiser, schedule, spec, samples,
                 predictions_dir=tmp_path)
        files = sorted(tmp_path.glob("*.png"))
        assert len(files) == 3
        mask = load_mask(files[0])
        assert np.array_equal(mask.disc, ordered[0].label.disc)


class TestRenderTable:
    def _report(self, disc=0.9134, cup=0.8, n=2):
        return EvalReport(dice_disc=disc, dice_cup=cup,
                          per_sample=[("a", disc, cup), ("b", disc, cup)], n=n)

    def test_single_report_two_rows(self):
        table = render_table([("M1", self._report())])
        lines = [ln for ln in table.splitlines() if ln and not ln.startswith("-")]
        assert len(lines) == 2

    def test_three_decimal_rounding(self):
        table = render_table([("M1", self._report(disc=0.9134))])
        assert "0.913" in table

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            render_table([])

    def test_sidecar_round_trip_at_three_decimals(self, tmp_path):
        reports = [("M1", self._report()), ("M2", self._report(disc=0.5005))]
        write_report_sidecar(tmp_path / "r.values", reports)
        back = read_report_sidecar(tmp_path / "r.values")
        for name, rep in reports:
            assert back[f"report.{name}.dice_disc"] == f"{rep.dice_disc:.3f}"
            assert back[f"report.{name}.dice_cup"] == f"{rep.dice_cup:.3f}"
            assert int(back[f"report.{name}.n"]) == rep.n
