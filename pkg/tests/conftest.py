import json
from pathlib import Path

import pytest
import torch

from scalevlad.config import toy_config
from scalevlad.data_io import load_dataset, synth_generate
from scalevlad.training import prepare_dataset

torch.set_num_threads(1)

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def record_acceptance():
    def record(key, ok, detail):
        ACCEPTANCE[key] = (bool(ok), detail)
        print(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")

    return record


@pytest.fixture(scope="session")
def small_data(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("small")
    return synth_generate(60, 3, out)


def tiny_config(manifest, out_dir="run", **kw):
    opts = dict(d_s=8, K=2, scales=(1, 2), hidden=8, epochs=3, batch_size=16)
    opts.update(kw)
    return toy_config(str(manifest), str(out_dir), **opts)


@pytest.fixture(scope="session")
def small_dataset(small_data):
    cfg = tiny_config(small_data)
    return prepare_dataset(load_dataset(small_data), cfg)


def write_config(cfg, path: Path) -> Path:
    path.write_text(json.dumps(cfg.to_dict(), indent=2), encoding="utf-8")
    return path
