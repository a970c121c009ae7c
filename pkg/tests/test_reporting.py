import json

import numpy as np
import pandas as pd
import pytest

from config import __version__, settings
from tools.reporting import config_hash, render_report, write_lines, write_report


@pytest.fixture
def frame():
    return pd.DataFrame({"measure": ["clicks", "hovers"], "H": [7.2, np.nan]})


def test_config_hash_is_stable():
    assert config_hash({"command": "kappa"}) == config_hash({"command": "kappa"})
    assert len(config_hash()) == 12
    assert config_hash({"command": "kappa"}) != config_hash({"command": "behavior"})


def test_csv_header_and_missing_values(frame):
    text = render_report(frame, "csv", seed=3, params={"command": "behavior"})
    lines = text.splitlines()
    assert lines[0] == f"# intentir {__version__} seed=3 config={config_hash({'command': 'behavior'})}"
    assert lines[1:] == ["measure,H", "clicks,7.2", "hovers,"]


def test_default_seed_comes_from_settings(frame):
    assert render_report(frame).startswith(f"# intentir {__version__} seed={settings.seed} ")


def test_json_rows_use_null(frame):
    document = json.loads(render_report(frame, "json", seed=1))
    assert document["header"]["tool"] == "intentir"
    assert document["header"]["seed"] == 1
    assert document["rows"] == [{"measure": "clicks", "H": 7.2}, {"measure": "hovers", "H": None}]


def test_unknown_format(frame):
    with pytest.raises(ValueError):
        render_report(frame, "xlsx")


def test_write_report_to_file(frame, tmp_path):
    path = tmp_path / "out" / "report.csv"
    write_report(frame, "csv", path, seed=5)
    assert path.read_text(encoding="utf-8") == render_report(frame, "csv", seed=5)


def test_write_lines_to_stdout(capsys):
    write_lines(["q1 Q0 d1 1 1.000000 run", "q1 Q0 d2 2 0.500000 run\n"])
    assert capsys.readouterr().out == "q1 Q0 d1 1 1.000000 run\nq1 Q0 d2 2 0.500000 run\n"
