import json
import subprocess
import sys
from pathlib import Path

import pytest

from vesseltrainer.config import TrainerConfig
from vesseltrainer.train import train_two_stage

PRIMARY_CLI = [sys.executable, "-m", "vesselforge.cli"]


def run_primary(*argv):
    subprocess.run([*PRIMARY_CLI, *argv], check=True)


def build_cohort(dest: Path, seed: int, cases: int, dims: int = 48) -> Path:
    """Phantom cohort plus caliber maps, all through the primary CLI; returns
    the extended training manifest path."""
    run_primary("phantom", "--seed", str(seed), "--cases", str(cases),
                "--dims", str(dims), "--spacing", "0.5", "--out", str(dest))
    doc = json.loads((dest / "manifest.json").read_text())
    for case in doc["cases"]:
        csa_name = f"{case['id']}_csa.vvol"
        run_primary("csa-map", "--mask", str(dest / case["vessel_mask"]),
                    "--out", str(dest / csa_name))
        case["csa_map"] = csa_name
    manifest = dest / "train_manifest.json"
    manifest.write_text(json.dumps({"cases": doc["cases"]}))
    return manifest


@pytest.fixture(scope="session")
def cohort_manifest(tmp_path_factory) -> Path:
    dest = tmp_path_factory.mktemp("cohort")
    return build_cohort(dest, seed=100, cases=10)


@pytest.fixture(scope="session")
def trained(tmp_path_factory, cohort_manifest):
    """The desk-scale acceptance run: both stages, fixed seed, 10 cases."""
    out = tmp_path_factory.mktemp("checkpoints")
    cfg = TrainerConfig(seed=0, steps_per_epoch=32, base_channels=8)
    result = train_two_stage(cohort_manifest, cfg, out)
    result["config"] = cfg
    return result
