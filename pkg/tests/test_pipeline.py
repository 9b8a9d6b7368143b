import os
import threading
import json

import pytest

from adaptrl.a2c import TrainerConfig
from adaptrl.adaptation import AdaptConfig
from adaptrl.errors import AdaptError, ConfigError, ShapeError
from adaptrl.files import file_hash
from adaptrl.metrics import SERIES, CurveRecord, export_trial
from adaptrl.networks import AGENT_ROLES, build, save_checkpoint
from adaptrl.pipeline import (MANIFEST, ExperimentPlan, check_donor, format_summary, run_pipeline, source_key,
                              summary_csv, transfer_summary)
from adaptrl.process import OutputLock, run_trials

TRANSFER_ARTIFACTS = {'source_checkpoint', 'embeddings', 'frames', 'adapted_encoder', 'target_checkpoint', *SERIES}


def tiny_plan(out_dir, **changes):
    values = dict(seeds=(0, 1), source_frames=100, target_frames=100, embedding_count=32, frame_count=32,
                  adapt=AdaptConfig(epochs=1, batch_size=16, critic_steps=2, alignment_projections=16, eval_size=32),
                  trainer=TrainerConfig(n_envs=2, n_steps=5, log_every=0), out_dir=str(out_dir))
    values.update(changes)
    return ExperimentPlan(**values)

def read_manifest(plan):
    return json.loads((plan.variant_dir / MANIFEST).read_text())

def write_variant(directory, trials):
    '''trials: {seed: [batch scores]}, one game per batch'''
    for seed, scores in trials.items():
        records = []
        for k, score in enumerate(scores, start=1):
            records.append(CurveRecord(seed, 'score_vs_batches', k, score))
            records.append(CurveRecord(seed, 'score_vs_games', k, score))
            records.append(CurveRecord(seed, 'ep_frames_ma100', k, 100.0 + k))
        export_trial(records, directory / f'trial-{seed}')
    return directory


def test_plan_validation(tmp_path):
    for bad in (dict(seeds=()), dict(seeds=(1, 1)), dict(variant='finetune'), dict(target_env='mini-tetris'),
                dict(variant='transfer+heads'), dict(source_frames=0)):
        with pytest.raises(ConfigError):
            tiny_plan(tmp_path, **bad)

def test_source_key_depends_on_seed_and_budget(tmp_path):
    plan = tiny_plan(tmp_path)
    assert source_key(plan, 0) == source_key(tiny_plan(tmp_path / 'other'), 0)
    assert source_key(plan, 0) != source_key(plan, 1)
    assert source_key(plan, 0) != source_key(tiny_plan(tmp_path, source_frames=200), 0)
    assert source_key(plan, 0) == source_key(tiny_plan(tmp_path, target_frames=200), 0)


def test_transfer_manifest(tmp_path):
    plan = tiny_plan(tmp_path / 'out')
    result = run_pipeline(plan)
    manifest = read_manifest(plan)
    assert sorted(manifest['trials']) == ['0', '1']
    for artifacts in manifest['trials'].values():
        assert set(artifacts) == TRANSFER_ARTIFACTS
        for entry in artifacts.values():
            assert entry['sha256'] == file_hash(tmp_path / 'out' / entry['path'])
    assert sorted(manifest['adapt_reports']) == ['0', '1']
    assert set(manifest['curves']) == set(SERIES)
    assert manifest['plan']['variant'] == 'transfer'
    assert result.manifest == plan.variant_dir / MANIFEST
    assert (tmp_path / 'out' / 'run.log').exists()
    assert not (tmp_path / 'out' / '.lock').exists()

def test_baseline_skips_adaptation(tmp_path):
    plan = tiny_plan(tmp_path, variant='baseline', seeds=(3,))
    result = run_pipeline(plan)
    manifest = read_manifest(plan)
    assert set(manifest['trials']['3']) == {'target_checkpoint', *SERIES}
    assert manifest['adapt_reports'] == {}
    assert result.reports == {3: None}
    assert not (plan.trial_dir(3) / 'embeddings.aadd').exists()
    assert not (tmp_path / 'cache').exists()

def test_pipeline_is_deterministic(tmp_path):
    first, second = tiny_plan(tmp_path / 'a', seeds=(2,)), tiny_plan(tmp_path / 'b', seeds=(2,))
    run_pipeline(first)
    run_pipeline(second)
    for name in ('encoder.ckpt', 'target.ckpt', 'adapt.csv', 'embeddings.aadd', 'frames.aadd',
                 *(f'{series}.csv' for series in SERIES)):
        assert (first.trial_dir(2) / name).read_bytes() == (second.trial_dir(2) / name).read_bytes(), name
    assert read_manifest(first)['trials'] == read_manifest(second)['trials']

def test_source_agent_is_cached(tmp_path):
    plan = tiny_plan(tmp_path, seeds=(0,))
    run_pipeline(plan)
    cached = list((tmp_path / 'cache').glob('source-mini-pong-*.ckpt'))
    assert len(cached) == 1
    stamp = cached[0].stat().st_mtime_ns
    run_pipeline(plan)
    assert cached[0].stat().st_mtime_ns == stamp

def test_parallel_trials_match_serial(tmp_path):
    serial, parallel = tiny_plan(tmp_path / 'serial'), tiny_plan(tmp_path / 'parallel', workers=2)
    run_pipeline(serial)
    run_pipeline(parallel)
    for seed in serial.seeds:
        assert (serial.trial_dir(seed) / 'target.ckpt').read_bytes() == \
            (parallel.trial_dir(seed) / 'target.ckpt').read_bytes()


def test_missing_donor(tmp_path):
    plan = tiny_plan(tmp_path, variant='transfer+heads', donor=str(tmp_path / 'nothing.ckpt'))
    with pytest.raises(ConfigError):
        check_donor(plan)

def test_donor_action_mismatch(tmp_path):
    save_checkpoint(build(AGENT_ROLES, 3, 0), tmp_path / 'pong.ckpt')
    plan = tiny_plan(tmp_path, variant='transfer+heads', donor=str(tmp_path / 'pong.ckpt'))
    with pytest.raises(ShapeError):
        check_donor(plan)

def test_donor_without_heads(tmp_path):
    save_checkpoint(build(('encoder',), 4, 0), tmp_path / 'encoder.ckpt')
    plan = tiny_plan(tmp_path, variant='transfer+heads', donor=str(tmp_path / 'encoder.ckpt'))
    with pytest.raises(ShapeError):
        check_donor(plan)

def test_transfer_with_donor_heads(tmp_path):
    donor = build(AGENT_ROLES, 4, 5)
    save_checkpoint(donor, tmp_path / 'donor.ckpt')
    plan = tiny_plan(tmp_path / 'out', variant='transfer+heads', donor=str(tmp_path / 'donor.ckpt'), seeds=(0,))
    assert check_donor(plan).equal(donor)
    run_pipeline(plan)
    assert set(read_manifest(plan)['trials']['0']) == TRANSFER_ARTIFACTS


def test_live_lock_blocks(tmp_path):
    (tmp_path / '.lock').write_text(str(os.getppid()))
    with pytest.raises(AdaptError):
        OutputLock(tmp_path).acquire()

def test_stale_lock_is_taken_over(tmp_path):
    (tmp_path / '.lock').write_text('99999999')
    with OutputLock(tmp_path) as lock:
        assert lock.owner() == os.getpid()
    assert not (tmp_path / '.lock').exists()

@pytest.mark.parametrize('workers', [1, 2])
def test_run_trials_keeps_seed_order(workers):
    assert run_trials(abs, [-3, 1, -2], workers) == [3, 1, 2]


def test_transfer_summary(tmp_path):
    transfer = write_variant(tmp_path / 'transfer', {0: [0, 6, 6, 6], 1: [6, 6, 6, 6]})
    baseline = write_variant(tmp_path / 'baseline', {0: [0, 0, 6, 6], 1: [0, 0, 0, 0]})
    summary = transfer_summary(transfer, baseline, threshold=5, window=1)
    assert [s.frames_to_threshold for s in summary['trials']['transfer']] == [160, 80]
    assert [s.frames_to_threshold for s in summary['trials']['baseline']] == [240, None]
    assert summary['medians']['transfer']['frames_to_threshold'] == 120
    # a trial that never reaches the threshold counts as slower than any that does
    assert summary['medians']['baseline']['frames_to_threshold'] is None
    assert summary['ratio'] is None
    assert summary['final_score_gap'] == 3.0
    assert summary['medians']['transfer']['peak_episode_frames'] == 104.0

def test_summary_csv_and_text(tmp_path):
    transfer = write_variant(tmp_path / 'transfer', {0: [6, 6]})
    baseline = write_variant(tmp_path / 'baseline', {0: [0, 6]})
    summary = transfer_summary(transfer, baseline, threshold=5, window=1)
    assert summary['ratio'] == 0.5
    lines = summary_csv(summary).splitlines()
    assert lines[0] == 'variant,trial,frames_to_threshold,peak_episode_frames,final_score'
    assert lines[1] == 'transfer,0,80,102.0,6.0'
    assert lines[-1] == 'baseline,median,160,102.0,6.0'
    assert 'transfer/baseline frames ratio: 0.500' in format_summary(summary, 5)

def test_summary_needs_trials(tmp_path):
    (tmp_path / 'transfer').mkdir()
    write_variant(tmp_path / 'baseline', {0: [1]})
    with pytest.raises(AdaptError):
        transfer_summary(tmp_path / 'transfer', tmp_path / 'baseline')

def test_simultaneous_locks_admit_one(tmp_path):
    barrier = threading.Barrier(4)
    outcomes = []

    def contend():
        barrier.wait()
        try:
            OutputLock(tmp_path).acquire()
            outcomes.append('locked')
        except AdaptError:
            outcomes.append('refused')

    threads = [threading.Thread(target=contend) for _ in range(4)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    assert sorted(outcomes) == ['locked', 'refused', 'refused', 'refused']
    assert OutputLock(tmp_path).owner() == os.getpid()

def test_lock_is_not_reentrant(tmp_path):
    with OutputLock(tmp_path):
        with pytest.raises(AdaptError):
            OutputLock(tmp_path).acquire()
