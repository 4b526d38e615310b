import json
import os
import signal
import socket
import subprocess
import sys

import pytest

from genretrieval.cli import main
from genretrieval.server import EngineBundle, start_server
from genretrieval.sampler import SamplerConfig


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    data = d / "data"
    assert main(["gen-synthetic", "--out", str(data), "--clusters", "4", "--items-per-cluster", "50",
                 "--subclusters", "5", "--users", "60", "--seed", "1"]) == 0
    cfg = d / "train.cfg"
    cfg.write_text("# small model\nepochs = 2\nH = 8\nD = 16\nM = 3\nembed_dim = 8\nbatch_size = 32\n")
    files = dict(
        catalog=str(data / "catalog.jsonl"),
        interactions=str(data / "train.jsonl"),
        test=str(data / "test.jsonl"),
        registry=str(data / "objectives.txt"),
        checkpoint=str(d / "model.urmm"),
        graph=str(d / "graph.urmg"),
        dir=d,
    )
    assert main(["train", "--config", str(cfg), "--catalog", files["catalog"], "--interactions",
                 files["interactions"], "--objective-registry", files["registry"],
                 "--checkpoint", files["checkpoint"]]) == 0
    assert main(["build-index", "--catalog", files["catalog"], "--checkpoint", files["checkpoint"],
                 "--graph", files["graph"], "--degree", "8"]) == 0
    return files


def retrieve_args(w, *extra):
    return ["retrieve", "--catalog", w["catalog"], "--checkpoint", w["checkpoint"], "--graph", w["graph"],
            "--K", "10", "--init-subset", "50", *extra]


def test_retrieve_prints_k_lines(workdir, capsys):
    capsys.readouterr()
    assert main(retrieve_args(workdir, "--history", "1,2,3", "--objective", "CPR", "--seed", "7")) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 10
    scores = [float(l.split("\t")[1]) for l in lines]
    assert scores == sorted(scores, reverse=True)


def test_retrieve_deterministic(workdir, capsys):
    capsys.readouterr()
    main(retrieve_args(workdir, "--history", "4,5", "--seed", "3"))
    a = capsys.readouterr().out
    main(retrieve_args(workdir, "--history", "4,5", "--seed", "3"))
    assert capsys.readouterr().out == a


def test_flags_override_config(workdir, capsys, tmp_path):
    cfg = tmp_path / "r.json"
    cfg.write_text(json.dumps({"K": 5, "init_subset": 50}))
    capsys.readouterr()
    main(retrieve_args(workdir, "--config", str(cfg)))
    assert len(capsys.readouterr().out.strip().splitlines()) == 10
    args = ["retrieve", "--config", str(cfg), "--catalog", workdir["catalog"], "--checkpoint",
            workdir["checkpoint"], "--graph", workdir["graph"]]
    main(args)
    assert len(capsys.readouterr().out.strip().splitlines()) == 5


def test_evaluate_writes_reports(workdir, capsys):
    d = workdir["dir"]
    out = []
    for name in ("a", "b"):
        rj, csv = d / f"{name}.json", d / f"{name}.csv"
        assert main(["evaluate", "--catalog", workdir["catalog"], "--checkpoint", workdir["checkpoint"],
                     "--graph", workdir["graph"], "--interactions", workdir["test"], "--K", "20",
                     "--init-subset", "100", "--seeds", "2", "--sweep-records", "20",
                     "--report-json", str(rj), "--csv", str(csv)]) == 0
        out.append((csv.read_bytes(), json.loads(rj.read_text())))
    assert out[0][0] == out[1][0]
    report = out[0][1]
    assert set(report["precision_by_T"]) == {"1", "2", "3", "4", "5"}
    assert set(report["ablation"]) == {"dis", "trans", "sum"}
    assert "objective" in capsys.readouterr().out


def test_flops_production_constants(tmp_path, capsys):
    rj = tmp_path / "f.json"
    assert main(["flops", "--report-json", str(rj)]) == 0
    out = capsys.readouterr().out
    assert "2164260864" in out and "5242880000000" in out
    rep = json.loads(rj.read_text())
    assert abs(rep["ratio"] - 2423) < 1


@pytest.mark.parametrize("argv", [
    ["retrieve", "--catalog", "/nonexistent/c.jsonl", "--checkpoint", "x", "--graph", "y"],
    ["retrieve"],
    ["flops", "--M", "0"],
])
def test_errors_are_one_line_nonzero(argv, capsys):
    assert main(argv) != 0
    err = capsys.readouterr().err.strip()
    assert err.startswith("error:") and len(err.splitlines()) == 1


def test_corrupt_checkpoint_reported(workdir, tmp_path, capsys):
    bad = tmp_path / "bad.urmm"
    buf = bytearray(open(workdir["checkpoint"], "rb").read())
    buf[100] ^= 0xFF
    bad.write_bytes(bytes(buf))
    argv = retrieve_args(workdir)
    argv[argv.index("--checkpoint") + 1] = str(bad)
    assert main(argv) == 1
    assert "CRC" in capsys.readouterr().err


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["retrieve", "--bogus"])
    assert exc.value.code == 2
    assert len(capsys.readouterr().err.strip().splitlines()) == 1


# -- server -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def bundle(workdir):
    return EngineBundle.load(workdir["catalog"], workdir["checkpoint"], workdir["graph"],
                             SamplerConfig(K=20, init_subset=60))


def ask(sock_file, sock, obj):
    sock.sendall(((obj if isinstance(obj, str) else json.dumps(obj)) + "\n").encode())
    return json.loads(sock_file.readline())


def test_handle_contract(bundle):
    out = bundle.handle({"history": [1, 2], "objective": "CPR", "k": 10, "seed": 7})
    assert len(out["items"]) == 10 == len(out["scores"])
    assert "warning" not in out
    assert bundle.handle({"history": [1, 2], "objective": "CPR", "k": 10, "seed": 7}) == out


def test_unknown_objective_warns(bundle):
    out = bundle.handle({"history": [3], "objective": "NEW-SCENARIO", "k": 5, "seed": 0})
    assert len(out["items"]) == 5 and "warning" in out


@pytest.mark.parametrize("line", ['{"history": [1], "objective": "CPR", "k": 0}',
                                  '{"history": "1", "objective": "CPR"}',
                                  '{"history": [99999], "objective": "CPR"}',
                                  '{"history": [1]}', "[1, 2]", "not json"])
def test_bad_requests(bundle, line):
    assert "error" in json.loads(bundle.handle_line(line))


def test_tcp_server_keeps_connection_after_error(bundle):
    server, thread = start_server(bundle)
    try:
        with socket.create_connection(server.server_address[:2], timeout=10) as s:
            f = s.makefile("r")
            req = {"history": [1, 2], "objective": "CPR", "k": 10, "seed": 7}
            first = ask(f, s, req)
            assert "error" in ask(f, s, "{broken")
            assert ask(f, s, req) == first
            assert len(first["items"]) == 10
    finally:
        server.shutdown()
        server.server_close()


def test_concurrent_clients_get_identical_answers(bundle):
    server, _ = start_server(bundle)
    try:
        req = {"history": [5, 6, 7], "objective": "PPR", "k": 8, "seed": 11}
        socks = [socket.create_connection(server.server_address[:2], timeout=10) for _ in range(4)]
        files = [s.makefile("r") for s in socks]
        for s in socks:
            s.sendall((json.dumps(req) + "\n").encode())
        answers = [json.loads(f.readline()) for f in files]
        assert all(a == answers[0] for a in answers)
        for s in socks:
            s.close()
    finally:
        server.shutdown()
        server.server_close()


def test_serve_subprocess_graceful_shutdown(workdir):
    proc = subprocess.Popen(
        [sys.executable, "-m", "genretrieval", "serve", "--catalog", workdir["catalog"], "--checkpoint",
         workdir["checkpoint"], "--graph", workdir["graph"], "--port", "0", "--K", "10", "--init-subset", "50"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, env={**os.environ, "PYTHONUNBUFFERED": "1"},
    )
    try:
        line = proc.stdout.readline()
        assert line.startswith("serving on"), line + proc.stderr.read()
        host, port = line.split()[-1].rsplit(":", 1)
        with socket.create_connection((host, int(port)), timeout=10) as s:
            out = ask(s.makefile("r"), s, {"history": [1], "objective": "CPR", "k": 10, "seed": 1})
        assert len(out["items"]) == 10
        proc.send_signal(signal.SIGTERM)
        assert proc.wait(timeout=10) == 0
        assert "server stopped" in proc.stdout.read()
    finally:
        if proc.poll() is None:
            proc.kill()
