"""The federated course: server/client state machines, FedAvg, and the
simulated single-process driver.

The same :class:`Server` and :class:`Client` objects run in both modes; only
the transport differs. Message flow for a course of ``R`` rounds::

    client -> EvalReport(join)                       (handshake, sample count)
    server -> ModelBroadcast(r0), AdapterDistribute(r0)          (interface 2)
    repeat per round r:
        client -> EvalReport(train metrics), AdapterUpload(r)
        server: FedAvg over all clients, ascending id             (interface 3)
        server -> AdapterDistribute(r + 1)                        (interface 4)
    server -> EvalRequest(R) with the final global adapter
    client -> EvalReport(eval)
    server -> Finish(R)
"""

from __future__ import annotations

import copy
import functools
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

from fedtune import adapters as A
from fedtune.bench import EvalTask, eval_constrained_generation, eval_perplexity
from fedtune.comm import (
    CodecFlags,
    CostLedger,
    estimate_transmission_time,
    ledger_record,
    save_checkpoint,
    load_checkpoint,
    transport,
)
from fedtune.config import CourseConfig
from fedtune.data import (
    ClientDataset,
    Corpus,
    client_datasets,
    gen_corpus,
    read_corpus,
    read_plan,
    split_dirichlet,
    split_meta,
    split_uniform,
)
from fedtune.errors import ConfigError, FedTuneError, ProtocolError, UsageError
from fedtune.model import MicroLM, init_model, per_sequence_loss
from fedtune.pfl import eval_personalized, pfedme_local
from fedtune.trainer import pretrain, train_adapter
from fedtune.tree import ParamTree
from fedtune.wire import SERVER_ID, Kind, Message, record_message, tree_message

log = logging.getLogger(__name__)

# the frozen base always travels at f32 (only adapters take the lossy dtypes)
MODEL_DTYPE = "f32"


# --------------------------------------------------------------------------
# aggregation (interface 3)


def aggregate_fedavg(received: dict[int, ParamTree], weights: dict[int, float]) -> ParamTree:
    """``sum_k (n_k / sum n) * theta_k``, accumulated in ascending client id."""
    if not received:
        raise ProtocolError("nothing to aggregate")
    ids = sorted(received)
    if set(ids) != set(weights):
        raise ProtocolError("weights and received trees cover different clients")
    if any(not weights[k] > 0 for k in ids):
        raise ProtocolError("aggregation weights must be positive")
    first = received[ids[0]]
    for k in ids[1:]:
        if not received[k].congruent(first):
            raise ProtocolError(f"client {k} uploaded an incongruent tree")
    total = float(sum(weights[k] for k in ids))
    out = {}
    for name in first:
        acc = None
        for k in ids:
            term = (weights[k] / total) * received[k][name]
            acc = term if acc is None else acc + term
        out[name] = acc
    return ParamTree(out)


# --------------------------------------------------------------------------
# course inputs


@dataclass(frozen=True)
class CourseInputs:
    model: MicroLM  # full base, frozen
    shards: tuple[ClientDataset, ...]
    test: Corpus


@functools.lru_cache(maxsize=8)
def _pretrained(model_cfg, pre) -> MicroLM:
    model = init_model(model_cfg)
    if pre.steps <= 0:
        return model
    corpus = gen_corpus(pre.seed, pre.n_domains, pre.samples_per_domain, model_cfg.seq_len,
                        model_cfg.vocab_size)
    return pretrain(model, corpus, pre.steps, pre.lr, pre.batch_size, pre.seed)


def build_base(cfg: CourseConfig) -> MicroLM:
    """Seeded init, optionally pretrained or loaded from an ``.fsp`` checkpoint; returned frozen."""
    if cfg.pretrain.checkpoint:
        model = init_model(cfg.model)
        base = load_checkpoint(cfg.pretrain.checkpoint)
        if not base.congruent(model.base):
            raise ConfigError("base checkpoint does not match the model config")
        return model.with_base(base).frozen()
    return _pretrained(cfg.model, cfg.pretrain).frozen()


def build_corpus(cfg: CourseConfig) -> Corpus:
    d, m = cfg.data, cfg.model
    if d.corpus:
        return read_corpus(d.corpus, m.vocab_size, d.n_domains)
    return gen_corpus(d.seed, d.n_domains, d.samples_per_domain, m.seq_len, m.vocab_size)


def build_test(cfg: CourseConfig) -> Corpus:
    d, m = cfg.data, cfg.model
    return gen_corpus(d.seed, d.n_domains, d.test_per_domain, m.seq_len, m.vocab_size, sample_seed=d.test_seed)


def build_plan(cfg: CourseConfig, corpus: Corpus):
    s = cfg.splitter
    if cfg.data.plan:
        return read_plan(cfg.data.plan, len(corpus))
    if s.method == "meta":
        return split_meta(corpus)
    n = s.n_clients or corpus.n_domains
    if s.method == "uniform":
        return split_uniform(corpus, n, s.seed)
    return split_dirichlet(corpus, n, s.alpha, s.seed)


def prepare(cfg: CourseConfig) -> CourseInputs:
    corpus = build_corpus(cfg)
    plan = build_plan(cfg, corpus)
    shards = client_datasets(corpus, plan, cfg.data.seed)
    return CourseInputs(build_base(cfg), tuple(shards), build_test(cfg))


def eval_task_for(cfg: CourseConfig, test: Corpus) -> EvalTask:
    return EvalTask(kind=cfg.eval_task, corpus=test)


def score_model(model: MicroLM, adapter, task: EvalTask) -> dict:
    if task.kind == "perplexity":
        rec = eval_perplexity(model, adapter, task)
        return {"eval_score": rec.aggregate, "test_ppl": rec.mean_perplexity}
    res = eval_constrained_generation(model, adapter, task)
    return {"eval_score": res.pass_at_1, "test_ppl": None}


def val_loss(model: MicroLM, adapter, shard: ClientDataset) -> float | None:
    if len(shard.val) == 0:
        return None
    return float(per_sequence_loss(model, adapter, shard.val).mean())


# --------------------------------------------------------------------------
# history


@dataclass
class RoundRecord:
    round: int
    train_loss: float | None = None
    val_loss: float | None = None
    eval_score: float | None = None
    test_ppl: float | None = None
    ledger: CostLedger = field(default_factory=CostLedger)
    complete: bool = False

    def as_dict(self) -> dict:
        return {
            "round": self.round,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "eval_score": self.eval_score,
            "test_ppl": self.test_ppl,
            "complete": self.complete,
            **{k: v for k, v in self.ledger.as_dict().items() if k != "warnings"},
        }


@dataclass
class CourseHistory:
    config: dict
    rounds: list[RoundRecord] = field(default_factory=list)
    initial_val_loss: float | None = None
    final_adapter: ParamTree | None = None
    personal_score: float | None = None
    residency: dict | None = None
    ledger: CostLedger = field(default_factory=CostLedger)
    failed: bool = False
    failure: str | None = None
    # in-memory only, not serialised
    checkpoint: Checkpoint | None = field(default=None, repr=False, compare=False)
    clients: dict | None = field(default=None, repr=False, compare=False)
    loaded_digest: str | None = field(default=None, repr=False)  # set when rebuilt from JSON

    @property
    def final_digest(self) -> str | None:
        return self.loaded_digest if self.final_adapter is None else self.final_adapter.digest()

    @property
    def final(self) -> RoundRecord | None:
        done = [r for r in self.rounds if r.complete]
        return done[-1] if done else None

    def summary(self) -> dict:
        last = self.final
        return {
            "rounds_completed": sum(r.complete for r in self.rounds),
            "failed": self.failed,
            "failure": self.failure,
            "final": None if last is None else last.as_dict(),
            "personal_score": self.personal_score,
            "final_adapter_digest": self.final_digest,
            "ledger": self.ledger.as_dict(),
            "residency": self.residency,
            "config": self.config,
        }

    def to_json(self) -> dict:
        return {**self.summary(), "initial_val_loss": self.initial_val_loss,
                "rounds": [r.as_dict() for r in self.rounds]}


def history_from_json(data: dict) -> CourseHistory:
    h = CourseHistory(config=data.get("config", {}), initial_val_loss=data.get("initial_val_loss"),
                      personal_score=data.get("personal_score"), residency=data.get("residency"),
                      failed=data.get("failed", False), failure=data.get("failure"),
                      loaded_digest=data.get("final_adapter_digest"))
    for r in data.get("rounds", []):
        led = CostLedger(bytes_up=r["bytes_up"], bytes_down=r["bytes_down"], flops=r["flops"],
                         wall_seconds=r["seconds"], param_bytes_resident=r["param_bytes_resident"])
        h.rounds.append(RoundRecord(round=r["round"], train_loss=r["train_loss"], val_loss=r["val_loss"],
                                    eval_score=r["eval_score"], test_ppl=r["test_ppl"], ledger=led,
                                    complete=r["complete"]))
    led = data.get("ledger") or {}
    if led:
        h.ledger = CostLedger(bytes_up=led["bytes_up"], bytes_down=led["bytes_down"], flops=led["flops"],
                              wall_seconds=led["seconds"], param_bytes_resident=led["param_bytes_resident"],
                              warnings=tuple(led.get("warnings", ())))
    return h


@dataclass(frozen=True)
class Checkpoint:
    """Server state between rounds: enough to resume a FedAvg course exactly."""

    next_round: int
    global_params: ParamTree
    history: CourseHistory

    def save(self, path) -> None:
        import json

        path = Path(path)
        save_checkpoint(self.global_params, path.with_suffix(".fsp"))
        meta = {"next_round": self.next_round, "history": self.history.to_json()}
        path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True))

    @classmethod
    def load(cls, path) -> Checkpoint:
        import json

        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        return cls(meta["next_round"], load_checkpoint(path.with_suffix(".fsp")),
                   history_from_json(meta["history"]))


# --------------------------------------------------------------------------
# interface 1


def preprocess_model(model: MicroLM, spec: A.AdapterSpec):
    """Returns ``(initial adapter, model part clients receive)``.

    Identity for PEFT kinds; for FedOT the clients get the layer-dropped emulator.
    """
    adapter = A.build_adapter(model, spec)
    if spec.kind == "fedot":
        return adapter, A.emulator_model(model, adapter)
    return adapter, model


def _fedot_order(cfg: CourseConfig) -> tuple[int, ...]:
    s, n = cfg.adapter, cfg.model.n_blocks
    kept = [s.front + j for j in A.kept_middle(n - s.front - s.back, s.drop_rate)]
    return tuple(range(s.front)) + tuple(kept) + tuple(range(n - s.back, n))


# --------------------------------------------------------------------------
# server


class Server:
    """Single-threaded event handler owning all server state.

    ``handle`` consumes one inbound message and returns ``(dest, message)``
    pairs to send; ``dest`` is a client id.
    """

    def __init__(self, cfg: CourseConfig, model: MicroLM, test: Corpus, expected: set[int],
                 resume: Checkpoint | None = None):
        if not expected:
            raise ConfigError("a course needs at least one client")
        if SERVER_ID in expected:
            raise ConfigError("client id 0 is reserved for the server")
        self.cfg = cfg
        self.flags = cfg.flags
        self.model = model
        self.expected = frozenset(expected)
        self.task = eval_task_for(cfg, test)
        self.init_adapter, self.client_model = preprocess_model(model, cfg.adapter)
        if resume is not None:
            self.round = resume.next_round
            self.global_params = resume.global_params
            self.history = copy.deepcopy(resume.history)
            self.history.rounds = [r for r in self.history.rounds if r.complete]
            if len(self.history.rounds) != self.round:
                raise ConfigError("checkpoint history does not match its round")
            self.ledger = self.history.ledger
        else:
            self.round = 0
            # the initial adapter is canonicalised so its digest equals what clients hold
            self.global_params = transport(self.init_adapter.params, self.flags)
            self.history = CourseHistory(config=cfg.to_dict())
            self.ledger = CostLedger()
        self.pre_codec_global: ParamTree | None = None
        self.weights: dict[int, float] = {}
        self.received: dict[int, ParamTree] = {}
        self.reports: dict[int, dict] = {}
        self.phase = "join"
        self.done = False

    # -- helpers --------------------------------------------------------
    def _record(self, rnd: int) -> RoundRecord:
        while len(self.history.rounds) <= rnd:
            self.history.rounds.append(RoundRecord(round=len(self.history.rounds)))
        return self.history.rounds[rnd]

    def _weighted(self, key: str) -> float | None:
        vals = {k: r.get(key) for k, r in self.reports.items() if r.get(key) is not None}
        if not vals:
            return None
        w = {k: self.weights[k] for k in vals}
        total = sum(w.values())
        return float(sum(w[k] / total * vals[k] for k in sorted(vals)))

    def _send_all(self, msg: Message) -> list[tuple[int, Message]]:
        return [(k, msg) for k in sorted(self.expected)]

    def _tree_out(self, kind: Kind, tree: ParamTree, dtype: str | None = None) -> Message:
        flags = self.flags if dtype is None else CodecFlags(self.flags.codec, dtype)
        msg = tree_message(kind, self.round, SERVER_ID, tree, flags)
        per_client = len(msg.payload)
        self.ledger = ledger_record(
            self.ledger, bytes_down=per_client * len(self.expected),
            seconds=estimate_transmission_time(per_client, self.cfg.bandwidth_bps, 1))
        return msg

    def reject(self, sender: int, reason: str) -> Message:
        return record_message(Kind.FINISH, self.round, SERVER_ID, {"error": reason}, self.flags)

    # -- interfaces 2 and 4 -------------------------------------------
    def broadcast_init(self) -> list[tuple[int, Message]]:
        out = self._send_all(self._tree_out(Kind.MODEL_BROADCAST, self.client_model.base, MODEL_DTYPE))
        out += self._send_all(self._tree_out(Kind.ADAPTER_DISTRIBUTE, self.global_params))
        self.phase = "train"
        return out

    def redistribute(self) -> list[tuple[int, Message]]:
        return self._send_all(self._tree_out(Kind.ADAPTER_DISTRIBUTE, self.global_params))

    # -- event handling --------------------------------------------------
    def handle(self, msg: Message) -> list[tuple[int, Message]]:
        if self.done:
            raise ProtocolError("course already finished")
        k = msg.sender
        if k not in self.expected:
            raise ProtocolError(f"message from unexpected client {k}")
        if msg.kind == Kind.EVAL_REPORT:
            rec = msg.record()
            event = rec.get("event")
            if event == "join":
                return self._on_join(k, rec)
            if msg.round != self.round:
                raise ProtocolError(f"client {k} reported for round {msg.round}, server at {self.round}")
            if event == "train" and self.phase == "train":
                self.reports[k] = rec
                return []
            if event == "eval" and self.phase == "eval":
                self.reports[k] = rec
                return self._maybe_finish()
            raise ProtocolError(f"unexpected {event!r} report in phase {self.phase}")
        if msg.kind == Kind.ADAPTER_UPLOAD:
            if self.phase != "train" or msg.round != self.round:
                raise ProtocolError(f"stale upload from client {k} (round {msg.round}, server at {self.round})")
            if k in self.received:
                raise ProtocolError(f"duplicate upload from client {k}")
            if k not in self.reports:
                raise ProtocolError(f"client {k} uploaded before reporting metrics")
            self.received[k] = msg.tree()
            self.ledger = ledger_record(self.ledger, bytes_up=len(msg.payload),
                                        seconds=estimate_transmission_time(len(msg.payload), self.cfg.bandwidth_bps))
            if set(self.received) == self.expected:
                return self._aggregate()
            return []
        raise ProtocolError(f"server cannot handle {msg.kind.name}")

    def _on_join(self, k: int, rec: dict) -> list[tuple[int, Message]]:
        if self.phase != "join":
            raise ProtocolError(f"client {k} joined after the course started")
        if k in self.weights:
            raise ProtocolError(f"duplicate client id {k}")
        n = int(rec.get("n_samples", 0))
        if n < 1:
            raise ProtocolError(f"client {k} has no training samples")
        self.weights[k] = float(n) if self.cfg.weighting == "samples" else 1.0
        if set(self.weights) == self.expected:
            return self.broadcast_init()
        return []

    def _aggregate(self) -> list[tuple[int, Message]]:
        cfg = self.cfg
        r = self.round
        rec = self._record(r)
        rec.train_loss = self._weighted("train_loss")
        # clients score the received global before training: that is round r-1's val loss
        prev_val = self._weighted("val_loss_in")
        if r == 0:
            self.history.initial_val_loss = prev_val
        else:
            self._record(r - 1).val_loss = prev_val
        compute = {k: rep.get("flops", 0) for k, rep in self.reports.items()}
        secs = max((rep.get("seconds", 0.0) for rep in self.reports.values()), default=0.0)
        warnings = [w for k in sorted(self.reports) for w in self.reports[k].get("warnings", [])]
        self.ledger = ledger_record(self.ledger, flops=sum(compute.values()), seconds=secs, warnings=warnings,
                                    resident=self._resident_bytes())
        self.pre_codec_global = aggregate_fedavg(self.received, self.weights)
        self.global_params = transport(self.pre_codec_global, self.flags)
        self.received, self.reports = {}, {}
        self.round = r + 1
        last = self.round == cfg.rounds
        if last or self.round % cfg.eval_every == 0:
            rec.eval_score, rec.test_ppl = self._server_eval()
        rec.complete = True
        rec.ledger = self.ledger
        self.history.ledger = self.ledger
        if last:
            self.phase = "eval"
            return self._send_all(self._tree_out(Kind.EVAL_REQUEST, self.global_params))
        return self.redistribute()

    def _server_eval(self):
        adapter = self.init_adapter.with_params(self.global_params)
        # FedOT: the full model with adapter entries overriding it is exactly plug_in
        s = score_model(self.model, adapter, self.task)
        return s["eval_score"], s["test_ppl"]

    def _resident_bytes(self) -> int:
        return 8 * (self.client_model.base.num_params() + (len(self.expected) + 1) * self.init_adapter.num_params())

    def _maybe_finish(self) -> list[tuple[int, Message]]:
        if set(self.reports) != self.expected:
            return []
        last = self.history.rounds[-1]
        last.val_loss = self._weighted("val_loss")
        if self.cfg.algo == "pfedme":
            self.history.personal_score = eval_personalized(
                [self.reports[k]["personal_score"] for k in sorted(self.reports)])
        self.history.final_adapter = self.global_params
        self.history.ledger = self.ledger
        last.ledger = self.ledger
        self.reports = {}
        self.done = True
        self.phase = "done"
        return self._send_all(record_message(Kind.FINISH, self.round, SERVER_ID, {"ok": True}, self.flags))

    def checkpoint(self) -> Checkpoint:
        if self.phase not in ("train", "done") or self.received:
            raise UsageError("checkpoints are taken between rounds")
        return Checkpoint(self.round, self.global_params, self.history)


# --------------------------------------------------------------------------
# client


class Client:
    """Client-side event handler; holds the frozen base (or emulator) and its adapter."""

    def __init__(self, cid: int, shard: ClientDataset, cfg: CourseConfig, test: Corpus | None = None,
                 decoder=None):
        if cid == SERVER_ID:
            raise ConfigError("client id 0 is reserved for the server")
        self.id = cid
        self.shard = shard
        self.cfg = cfg
        self.flags = cfg.flags
        self.test = test
        self.decode = decoder or (lambda m: m.tree())
        self.round = 0
        self.model: MicroLM | None = None
        self.adapter: A.AdapterState | None = None
        self.personal: A.AdapterState | None = None
        self.ledger = CostLedger()
        self.done = False
        self._base_digest: str | None = None

    def join_message(self) -> Message:
        return record_message(Kind.EVAL_REPORT, 0, self.id, {"event": "join", "n_samples": self.shard.n_samples},
                              self.flags)

    def _adapter_from(self, params: ParamTree) -> A.AdapterState:
        spec = self.cfg.adapter
        if spec.kind == "lora" and not spec.targets:
            spec = replace(spec, targets=A.default_lora_targets(self.model))
        if spec.kind == "fedot":
            return A.AdapterState(spec=spec, params=params, emulator=self.model.base,
                                  block_order=self.model.block_order)
        return A.AdapterState(spec=spec, params=params)

    def handle(self, msg: Message) -> list[Message]:
        if msg.round < self.round:
            raise ProtocolError(f"client {self.id}: message for round {msg.round} after round {self.round}")
        self.round = msg.round
        if msg.kind == Kind.MODEL_BROADCAST:
            base = self.decode(msg)
            self.ledger = ledger_record(self.ledger, bytes_down=len(msg.payload))
            order = _fedot_order(self.cfg) if self.cfg.adapter.kind == "fedot" else ()
            self.model = MicroLM(config=self.cfg.model, base=base, block_order=order).frozen()
            self._base_digest = base.digest() if self.cfg.mode == "distributed" else None
            return []
        if msg.kind == Kind.ADAPTER_DISTRIBUTE:
            return self._train(msg)
        if msg.kind == Kind.EVAL_REQUEST:
            return self._final_eval(msg)
        if msg.kind == Kind.FINISH:
            rec = msg.record()
            if "error" in rec:
                raise ProtocolError(f"server rejected client {self.id}: {rec['error']}")
            self.done = True
            return []
        raise ProtocolError(f"client cannot handle {msg.kind.name}")

    def _train(self, msg: Message) -> list[Message]:
        if self.model is None:
            raise ProtocolError("adapter received before the model broadcast")
        params = self.decode(msg)
        self.ledger = ledger_record(self.ledger, bytes_down=len(msg.payload))
        received = self._adapter_from(params)
        self.adapter = received
        rec = {"event": "train", "val_loss_in": val_loss(self.model, received, self.shard)}
        key = (self.cfg.seed, self.id, msg.round)
        tcfg = self.cfg.trainer
        if self.cfg.algo == "pfedme":
            res = pfedme_local(self.model, received, self.shard, params, tcfg, self.cfg.pfl, key)
            self.personal = res.personal
            upload = res.w
            local = res.local
        else:
            local = train_adapter(self.model, received, self.shard, tcfg, key)
            upload = local.adapter.params
        self.adapter = received.with_params(upload)
        self.ledger = self.ledger + local.ledger
        rec.update(train_loss=local.train_loss, flops=local.ledger.flops,
                   seconds=local.ledger.wall_seconds, warnings=list(local.warnings))
        up = tree_message(Kind.ADAPTER_UPLOAD, msg.round, self.id, upload, self.flags)
        self.ledger = ledger_record(self.ledger, bytes_up=len(up.payload))
        return [record_message(Kind.EVAL_REPORT, msg.round, self.id, rec, self.flags), up]

    def _final_eval(self, msg: Message) -> list[Message]:
        params = self.decode(msg)
        self.adapter = self._adapter_from(params)
        rec: dict = {"event": "eval"}
        if self.cfg.algo == "pfedme" and self.personal is not None:
            rec["val_loss"] = val_loss(self.model, self.personal, self.shard)
            if self.test is None:
                raise ConfigError("personalised evaluation needs the test corpus")
            rec["personal_score"] = score_model(self.model, self.personal,
                                                eval_task_for(self.cfg, self.test))["eval_score"]
        else:
            rec["val_loss"] = val_loss(self.model, self.adapter, self.shard)
        return [record_message(Kind.EVAL_REPORT, msg.round, self.id, rec, self.flags)]


# --------------------------------------------------------------------------
# simulated mode


class _SharedDecoder:
    """Decodes each distinct payload once, so identical broadcasts share one tree.

    This is the round-robin switching operator: every client references the
    same frozen base instance and only adapters are per-client.
    """

    def __init__(self):
        self._cache: dict[tuple, ParamTree] = {}

    def __call__(self, msg: Message) -> ParamTree:
        if msg.kind != Kind.MODEL_BROADCAST:
            return msg.tree()
        key = (msg.flags, msg.payload)
        if key not in self._cache:
            self._cache[key] = msg.tree()
        return self._cache[key]


def residency(clients: list[Client], server: Server) -> dict:
    """Parameter counts resident in a simulated course."""
    bases = {id(c.model.base): c.model.base.num_params() for c in clients if c.model is not None}
    adapter = sum(c.adapter.num_params() for c in clients if c.adapter is not None)
    personal = sum(c.personal.num_params() for c in clients if c.personal is not None)
    glob = server.global_params.num_params()
    base = sum(bases.values())
    return {"base_instances": len(bases), "base": base, "client_adapters": adapter, "personal_adapters": personal,
            "global_adapter": glob, "total": base + adapter + personal + glob}


def run_simulated(cfg: CourseConfig, inputs: CourseInputs | None = None, *, resume: Checkpoint | None = None,
                  visit_order: list[int] | None = None, stop_after: int | None = None,
                  on_message=None) -> CourseHistory:
    """Single-process course: one shared base, clients take turns on it.

    ``visit_order`` permutes the order in which clients are driven each round;
    results do not depend on it. ``stop_after`` halts after that many rounds
    and returns the partial history with ``history.checkpoint`` attached.
    """
    cfg.validate()
    inputs = inputs or prepare(cfg)
    ids = [s.client_id for s in inputs.shards]
    server = Server(cfg, inputs.model, inputs.test, set(ids), resume=resume)
    decoder = _SharedDecoder()
    clients = {s.client_id: Client(s.client_id, s, cfg, inputs.test, decoder) for s in inputs.shards}
    order = list(visit_order) if visit_order is not None else sorted(ids)
    if sorted(order) != sorted(ids):
        raise ConfigError("visit_order must be a permutation of the client ids")
    rank = {k: i for i, k in enumerate(order)}

    pending: deque = deque()
    for k in order:
        pending.append((SERVER_ID, clients[k].join_message()))
    try:
        while pending:
            dest, msg = pending.popleft()
            if on_message is not None:
                on_message(dest, msg)
            if dest == SERVER_ID:
                outs = server.handle(msg)
                outs = sorted(outs, key=lambda o: (rank[o[0]],))  # stable: per-client order kept
                for k, m in outs:
                    pending.append((k, m))
                if stop_after is not None and server.phase == "train" and server.round >= stop_after \
                        and not server.received and server.round < cfg.rounds:
                    hist = server.history
                    hist.checkpoint = server.checkpoint()
                    hist.final_adapter = server.global_params
                    return hist
            else:
                for m in clients[dest].handle(msg):
                    pending.append((SERVER_ID, m))
    except FedTuneError as exc:
        server.history.failed = True
        server.history.failure = f"{type(exc).__name__}: {exc}"
        exc.history = server.history
        raise
    hist = server.history
    hist.residency = residency(list(clients.values()), server)
    hist.clients = clients
    hist.checkpoint = server.checkpoint()
    return hist


def run_course(cfg: CourseConfig, inputs: CourseInputs | None = None, **kw) -> CourseHistory:
    """Run a full course in the configured mode."""
    cfg.validate()
    if cfg.mode == "simulated":
        return run_simulated(cfg, inputs, **kw)
    from fedtune.distributed import run_loopback

    return run_loopback(cfg, inputs, **kw)


def train_local(cfg: CourseConfig, inputs: CourseInputs) -> ParamTree:
    """Standalone local training: ``rounds`` x ``local_update`` on one shard.

    Between rounds the adapter is checkpointed at the course's codec, i.e. it
    passes through the same f32/f16/i8 storage as a federated round trip.
    """
    if len(inputs.shards) != 1:
        raise ConfigError("local training takes exactly one shard")
    shard = inputs.shards[0]
    adapter, client_model = preprocess_model(inputs.model, cfg.adapter)
    model = transport_model(client_model)
    if cfg.adapter.kind == "fedot":
        adapter = replace(adapter, emulator=model.base)
    params = transport(adapter.params, cfg.flags)
    for r in range(cfg.rounds):
        res = train_adapter(model, adapter.with_params(params), shard, cfg.trainer, (cfg.seed, shard.client_id, r))
        params = transport(res.adapter.params, cfg.flags)
    return params


def transport_model(model: MicroLM) -> MicroLM:
    return model.with_base(transport(model.base, CodecFlags("none", MODEL_DTYPE)))
