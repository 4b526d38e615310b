"""Engine bundle and a newline-delimited JSON retrieval server."""

from __future__ import annotations

import json
import logging
import socketserver
import threading
from dataclasses import dataclass

import numpy as np

from .catalog import CandidateCatalog, load_catalog
from .neighbor_index import NeighborGraph, load_graph
from .sampler import SamplerConfig, retrieve
from .scoring import DecomposedMapping, ShapeError, load_checkpoint
from .trainer import ToyFeatureGenerator, generator_from_sections

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EngineBundle:
    catalog: CandidateCatalog
    mapping: DecomposedMapping
    graph: NeighborGraph
    generator: ToyFeatureGenerator
    config: SamplerConfig

    def __post_init__(self):
        n = self.catalog.n_items
        if not (self.mapping.n_items == self.graph.n_items == self.generator.item_embed.shape[0] == n):
            raise ShapeError(
                f"bundle mismatch: catalog {n}, mapping {self.mapping.n_items}, "
                f"graph {self.graph.n_items}, generator {self.generator.item_embed.shape[0]}"
            )
        if self.generator.out_dim != self.mapping.U.shape[0]:
            raise ShapeError("feature generator output dim does not match U")

    @classmethod
    def load(cls, catalog_path, checkpoint_path, graph_path, config: SamplerConfig) -> "EngineBundle":
        catalog = load_catalog(catalog_path)
        mapping, extra, meta = load_checkpoint(checkpoint_path, catalog.text_features)
        return cls(catalog, mapping, load_graph(graph_path), generator_from_sections(extra, meta), config)

    def handle(self, request: dict) -> dict:
        """Serve one request: ``history``, ``objective``, optional ``query``, ``k``, ``seed``."""
        history = request.get("history", [])
        if not isinstance(history, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in history):
            raise ValueError("'history' must be an array of integers")
        for i in history:
            self.catalog.check_id(i)
        objective = request.get("objective")
        if not isinstance(objective, str):
            raise ValueError("'objective' must be a string")
        k = request.get("k", self.config.K)
        seed = request.get("seed", self.config.seed)
        if not isinstance(k, int) or k < 1:
            raise ValueError("'k' must be a positive integer")
        if not isinstance(seed, int):
            raise ValueError("'seed' must be an integer")
        cfg = self.config.with_(K=k, seed=seed, init_subset=max(self.config.init_subset, k))
        F = self.generator.forward(history, objective)
        ids, scores = retrieve(self.mapping, F, self.graph, cfg)
        out = {"items": [int(i) for i in ids], "scores": [float(s) for s in scores]}
        if self.generator.tag_index(objective) < 0:
            out["warning"] = f"unknown objective {objective!r}; used the default objective embedding"
        return out

    def handle_line(self, line: str) -> str:
        try:
            request = json.loads(line)
            if not isinstance(request, dict):
                raise ValueError("request must be a JSON object")
            response = self.handle(request)
        except (ValueError, IndexError, TypeError) as exc:
            response = {"error": str(exc)}
        return json.dumps(response)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        bundle: EngineBundle = self.server.bundle
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace").strip()
            if not line:
                continue
            self.wfile.write((bundle.handle_line(line) + "\n").encode("utf-8"))
            self.wfile.flush()


class RetrievalServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, bundle: EngineBundle):
        super().__init__(address, _Handler)
        self.bundle = bundle


def start_server(bundle: EngineBundle, host: str = "127.0.0.1", port: int = 0):
    """Start serving in a background thread; returns (server, thread). Port 0 picks a free port."""
    server = RetrievalServer((host, port), bundle)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, thread
