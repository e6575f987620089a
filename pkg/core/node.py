"""
Cooperative network node service.

Every agency runs one ``CooperativeNode``. A node is both server and client:
it listens for framed requests from its neighbors and sends its own requests
over short-lived connections (one request frame, one reply frame).

One exchange round for a target agency A runs as follows:

1. A publishes its own pooled embedding for the round (it acts as a sender
   for its neighbors' exchanges in the same round).
2. A picks ``n`` HE agencies uniformly among its neighbors and sends
   HE_ROLE_NOTIFY to every neighbor.
3. Each neighbor encrypts its embedding under A's Paillier key and submits it
   to exactly one HE agency, sending an empty decline to the others so each
   agency knows when its window is complete.
4. Each HE agency sums what it received without decrypting, pushes the sum to
   its neighbors with SUM_BROADCAST and then erases its inbox.
5. A polls the agencies with exponential backoff, combines the sums, decrypts
   and decodes the neighbor sum.
"""
import json
import logging
import random
import socketserver
import threading
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from enum import IntEnum
from pathlib import Path

import numpy as np
from django.conf import settings

from . import crypto, wire
from .datasets import NODE_REGRESSION, TASK_KINDS
from .exceptions import (
    CNLError, ConfigError, CryptoError, PeerUnreachableError, ProtocolError, ShapeError, UnknownTaskError,
)
from .nn import EMBEDDING_MODELS, GCN
from .wire import Message, MessageType

logger = logging.getLogger(__name__)

RETRY_PAUSE_SECS = 0.05
RESULT_DEADLINE_FACTOR = 1.5
NO_CIPHERTEXT = object()


class TaskState(IntEnum):
    IDLE = 0
    ANNOUNCED = 1
    EMBEDDING_COMPUTING = 2
    SUBMITTED = 3
    AGGREGATING = 4
    BROADCAST = 5
    DONE = 6

    @property
    def label(self):
        return _STATE_LABELS[self]

    @classmethod
    def from_label(cls, label):
        for state, name in _STATE_LABELS.items():
            if name == label:
                return state
        raise ProtocolError(f'unknown task state {label!r}')


_STATE_LABELS = {
    TaskState.IDLE: 'Idle',
    TaskState.ANNOUNCED: 'Announced',
    TaskState.EMBEDDING_COMPUTING: 'EmbeddingComputing',
    TaskState.SUBMITTED: 'Submitted',
    TaskState.AGGREGATING: 'Aggregating',
    TaskState.BROADCAST: 'Broadcast',
    TaskState.DONE: 'Done',
}


@dataclass(frozen=True)
class Neighbor:
    id: str
    address: tuple


@dataclass
class PeerConfig:
    """Static node configuration; the identity key is loaded (or created) on first use"""

    node_id: str
    listen: tuple
    neighbors: tuple = ()
    data_dir: Path = None
    config_dir: Path = None
    identity_key_path: Path = None
    identity_key: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.node_id:
            raise ConfigError('node_id must not be empty')
        self.neighbors = tuple(self.neighbors)
        ids = [n.id for n in self.neighbors]
        if len(set(ids)) != len(ids):
            raise ConfigError(f'{self.node_id}: neighbor ids must be distinct')
        if self.node_id in ids:
            raise ConfigError(f'{self.node_id} lists itself as a neighbor')

    @property
    def neighbor_ids(self):
        return tuple(n.id for n in self.neighbors)

    @classmethod
    def from_dict(cls, data, config_dir=None):
        try:
            neighbors = tuple(
                Neighbor(str(entry['id']), wire.parse_address(entry['addr']))
                for entry in data.get('neighbors', [])
            )
            base = Path(config_dir) if config_dir else Path('.')
            data_dir = data.get('data_dir')
            key_path = data.get('identity_key_path')
            return cls(
                node_id=str(data['node_id']),
                listen=wire.parse_address(data['listen']),
                neighbors=neighbors,
                data_dir=base / data_dir if data_dir else None,
                config_dir=Path(config_dir) if config_dir else None,
                identity_key_path=base / key_path if key_path else None,
            )
        except (KeyError, TypeError, AttributeError, ProtocolError) as exc:
            raise ConfigError(f'malformed peer config: {exc}') from exc

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding='utf-8'))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f'cannot read peer config {path}: {exc}') from exc
        return cls.from_dict(data, config_dir=path.parent)

    def to_dict(self):
        data = {
            'node_id': self.node_id,
            'listen': wire.format_address(self.listen),
            'neighbors': [{'id': n.id, 'addr': wire.format_address(n.address)} for n in self.neighbors],
        }
        if self.data_dir:
            data['data_dir'] = str(self.data_dir)
        if self.identity_key_path:
            data['identity_key_path'] = str(self.identity_key_path)
        return data

    def load_identity(self):
        if self.identity_key is None:
            if self.identity_key_path:
                self.identity_key = crypto.load_identity_key(self.identity_key_path, create=True)
            else:
                self.identity_key = crypto.generate_identity_key()
        return self.identity_key


@dataclass(frozen=True)
class TaskConfig:
    task_id: str
    task_kind: str = NODE_REGRESSION
    model: str = GCN
    dim: int = 16
    task_iter: int = 1
    he_agency_count: int = 1
    lr: float = 0.01
    weight_decay: float = 5e-4
    optimizer: str = 'adam'
    epochs: int = 200
    patience: int = 50
    lookback: int = 20
    horizon: int = 5
    seeds: tuple = (0,)
    dataset: str = ''
    key_bits: int = None
    timeout_secs: float = None
    multi_submit: bool = False
    raw_sum: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'seeds', tuple(int(s) for s in self.seeds))
        if not self.task_id:
            raise ConfigError('task_id must not be empty')
        if self.task_kind not in TASK_KINDS:
            raise ConfigError(f'task_kind must be one of {TASK_KINDS}')
        if self.model not in EMBEDDING_MODELS:
            raise ConfigError(f'model must be one of {EMBEDDING_MODELS}')
        if self.dim < 1 or self.task_iter < 1 or self.he_agency_count < 1:
            raise ConfigError('dim, task_iter and he_agency_count must be positive')
        if self.epochs < 0 or self.lookback < 1 or self.horizon < 1:
            raise ConfigError('epochs must be >= 0, lookback and horizon >= 1')

    def effective_he_count(self, neighbor_count):
        """HE agency count after the CNL_HE_COUNT override, capped by the neighbor count"""
        wanted = settings.CNL['HE_COUNT'] or self.he_agency_count
        return max(1, min(wanted, neighbor_count))

    def effective_timeout(self):
        return self.timeout_secs or settings.CNL['TIMEOUT_SECS']

    def to_dict(self):
        data = asdict(self)
        data['seeds'] = list(self.seeds)
        return data

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f'unknown task fields {sorted(unknown)}')
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f'malformed task config: {exc}') from exc


@dataclass
class ExchangeRecord:
    round: int
    target: str
    state: TaskState = TaskState.IDLE
    expected: frozenset = None
    reported: set = field(default_factory=set)
    inbox: dict = field(default_factory=dict)
    closed: bool = False
    retained: tuple = None
    complete: threading.Event = field(default_factory=threading.Event)


@dataclass
class TaskRecord:
    config: TaskConfig
    hops: int
    state: TaskState = TaskState.ANNOUNCED
    keypair: tuple = None
    peer_keys: dict = field(default_factory=dict)
    embeddings: dict = field(default_factory=dict)
    ready: dict = field(default_factory=dict)
    exchanges: dict = field(default_factory=dict)
    shares: dict = field(default_factory=dict)
    assembled_round: int = -1
    finished: set = field(default_factory=set)
    key_lock: threading.Lock = field(default_factory=threading.Lock)

    def advance(self, state):
        """Move forward only; requests to move backwards are ignored"""
        if state > self.state:
            self.state = state
            return True
        return False


@dataclass(frozen=True)
class AggregateShare:
    """One HE agency's encrypted partial sum as the target receives it"""

    agency: str
    vector: crypto.CiphertextVector
    addend_count: int
    partial: bool
    missing: tuple

    @classmethod
    def from_wire(cls, agency, control, ciphertext, public_key):
        vector = crypto.CiphertextVector.from_dict(ciphertext, public_key) if ciphertext else None
        addend_count = int(control.get('addend_count', 0))
        if vector is not None and vector.addend_count != addend_count:
            raise ProtocolError(f'{agency} reported {addend_count} addends for a sum of {vector.addend_count}')
        return cls(agency, vector, addend_count, bool(control.get('partial')), tuple(control.get('missing', ())))


@dataclass(frozen=True)
class ExchangeResult:
    neighbor_sum: np.ndarray
    addend_count: int
    partial: bool = False
    he_agencies: tuple = ()
    missing: tuple = ()
    lost_agencies: tuple = ()

    def neighbor_mean(self):
        return self.neighbor_sum / max(1, self.addend_count)


@dataclass
class _PeerEntry:
    address: tuple
    public: object = None
    pem: str = None


@dataclass(frozen=True)
class TrafficRecord:
    type: str
    sender: str
    task_id: str
    control: dict
    ciphertext: object


def select_he_agencies(neighbor_ids, n, rng):
    """Uniform sample of n distinct neighbors, returned sorted"""
    neighbor_ids = sorted(neighbor_ids)
    if not 1 <= n <= len(neighbor_ids):
        raise ConfigError(f'cannot choose {n} HE agencies from {len(neighbor_ids)} neighbors')
    return tuple(sorted(rng.sample(neighbor_ids, n)))


def choose_destinations(he_agencies, rng, multi_submit=False):
    """Exactly one agency by default; a random non-empty subset when multi_submit is set"""
    he_agencies = sorted(he_agencies)
    if not he_agencies:
        raise ProtocolError('at least one HE agency is required to submit an embedding')
    if not multi_submit:
        return (rng.choice(he_agencies),)
    return tuple(sorted(rng.sample(he_agencies, rng.randint(1, len(he_agencies)))))


class _NodeServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, node):
        self.node = node
        super().__init__(address, _RequestHandler)


class _RequestHandler(socketserver.BaseRequestHandler):
    def handle(self):
        node = self.server.node
        self.request.settimeout(node.socket_timeout)
        try:
            message = wire.recv_message(self.request)
        except (ProtocolError, OSError) as exc:
            logger.warning('Node %s dropped a connection: %s', node.node_id, exc)
            return
        reply = node.dispatch(message)
        try:
            wire.send_message(self.request, reply)
        except OSError as exc:
            logger.warning('Node %s could not reply to %s: %s', node.node_id, message.sender, exc)


class CooperativeNode:
    def __init__(self, config, record_traffic=False):
        self.config = config
        self.node_id = config.node_id
        self._identity = config.load_identity()
        self._identity_pem = crypto.public_key_pem(self._identity)
        self._lock = threading.RLock()
        self._tasks = {}
        self._peers = {n.id: _PeerEntry(n.address) for n in config.neighbors}
        self._server = None
        self._thread = None
        self.socket_timeout = settings.CNL['TIMEOUT_SECS']
        self.registration_count = 0
        self.sent_counts = Counter()
        self.record_traffic = record_traffic
        self.traffic = []
        self._handlers = {
            MessageType.HELLO: self._on_hello,
            MessageType.TASK_ANNOUNCE: self._on_task_announce,
            MessageType.PUBKEY_SHARE: self._on_pubkey_share,
            MessageType.HE_ROLE_NOTIFY: self._on_he_role_notify,
            MessageType.EMB_SUBMIT: self._on_emb_submit,
            MessageType.SUM_BROADCAST: self._on_sum_broadcast,
            MessageType.STATUS_QUERY: self._on_status_query,
            MessageType.RESULT_FETCH: self._on_result_fetch,
        }

    def __repr__(self):
        return f'<CooperativeNode {self.node_id} {wire.format_address(self.address)}>'

    @property
    def address(self):
        if self._server is not None:
            return self._server.server_address[:2]
        return self.config.listen

    @property
    def running(self):
        return self._server is not None

    @property
    def seen_tasks(self):
        with self._lock:
            return frozenset(self._tasks)

    # Lifecycle

    def start(self):
        if self._server is not None:
            return self
        try:
            self._server = _NodeServer(self.config.listen, self)
        except OSError as exc:
            raise ProtocolError(f'{self.node_id} cannot listen on {wire.format_address(self.config.listen)}: {exc}') from exc
        self._thread = threading.Thread(
            target=self._server.serve_forever, kwargs={'poll_interval': 0.05},
            name=f'cnl-{self.node_id}', daemon=True)
        self._thread.start()
        logger.info('Node %s listening on %s', self.node_id, wire.format_address(self.address))
        return self

    def stop(self):
        if self._server is None:
            return
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=1.0)
        self._server = None
        self._thread = None
        logger.info('Node %s stopped', self.node_id)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc_info):
        self.stop()

    # Peers and sealing

    def _remember(self, peer_id, address=None, pem=None):
        if peer_id == self.node_id:
            return
        with self._lock:
            entry = self._peers.get(peer_id)
            if entry is None:
                entry = self._peers[peer_id] = _PeerEntry(address)
            elif address is not None and peer_id not in self.config.neighbor_ids:
                entry.address = address
            if pem and pem != entry.pem:
                entry.public = crypto.load_public_pem(pem)
                entry.pem = pem

    def connect(self, peer_id, address):
        """Point a configured neighbor at a new address (used when ports are OS-assigned)"""
        with self._lock:
            self.config.neighbors = tuple(
                Neighbor(n.id, tuple(address)) if n.id == peer_id else n for n in self.config.neighbors)
            entry = self._peers.setdefault(peer_id, _PeerEntry(None))
            entry.address = tuple(address)

    def _peer(self, peer_id):
        with self._lock:
            entry = self._peers.get(peer_id)
        if entry is None or entry.address is None:
            raise PeerUnreachableError(f'{self.node_id} has no address for {peer_id}')
        return entry

    def _identity_for(self, peer_id, handshake=True):
        entry = self._peer(peer_id)
        if entry.public is None and handshake:
            self.hello(peer_id)
        if entry.public is None:
            raise ProtocolError(f'{self.node_id} has no identity key for {peer_id}')
        return entry.public

    def _seal(self, peer_id, control, ciphertext=NO_CIPHERTEXT, handshake=True):
        public = self._identity_for(peer_id, handshake)
        body = json.dumps(control, separators=(',', ':'), sort_keys=True).encode('utf-8')
        payload = {'sealed': wire.b64encode(crypto.control_seal(public, body))}
        if ciphertext is not NO_CIPHERTEXT:
            payload['ciphertext'] = ciphertext
        return payload

    def _open(self, payload):
        if 'sealed' not in payload:
            raise ProtocolError('control payload is not sealed')
        body = crypto.control_open(self._identity, wire.b64decode(payload['sealed']))
        try:
            control = json.loads(body.decode('utf-8'))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ProtocolError(f'sealed payload is not JSON: {exc}') from exc
        return control, payload.get('ciphertext')

    def _record(self, message, control, ciphertext):
        if self.record_traffic:
            with self._lock:
                self.traffic.append(TrafficRecord(message.type.value, message.sender, message.task_id, control, ciphertext))

    # Client side

    def _send_frame(self, address, message, retries=None):
        attempts = retries or settings.CNL['SEND_RETRIES']
        last_error = None
        for attempt in range(attempts):
            try:
                reply = wire.request(address, message, self.socket_timeout)
            except OSError as exc:
                last_error = exc
                time.sleep(RETRY_PAUSE_SECS * (attempt + 1))
                continue
            with self._lock:
                self.sent_counts[message.type] += 1
            return reply
        raise PeerUnreachableError(
            f'{self.node_id} could not reach {wire.format_address(address)} after {attempts} attempts: {last_error}')

    def _request(self, peer_id, message_type, task_id, control, ciphertext=NO_CIPHERTEXT):
        entry = self._peer(peer_id)
        message = Message(message_type, self.node_id, task_id, self._seal(peer_id, control, ciphertext))
        logger.debug('Node %s -> %s %s task=%s', self.node_id, peer_id, message_type.value, task_id)
        reply = self._send_frame(entry.address, message)
        if reply.type == MessageType.ERROR:
            raise self._remote_error(peer_id, reply.payload)
        control, ciphertext = self._open(reply.payload)
        self._record(reply, control, ciphertext)
        return reply, control, ciphertext

    def _remote_error(self, peer_id, payload):
        text = f'{peer_id} rejected the request: {payload.get("error")}'
        if payload.get('code') == UnknownTaskError.__name__:
            return UnknownTaskError(text)
        return ProtocolError(text)

    def hello(self, peer_id):
        """Exchange node ids and identity keys with a peer"""
        entry = self._peer(peer_id)
        message = Message(MessageType.HELLO, self.node_id, None, {
            'node_id': self.node_id,
            'listen': wire.format_address(self.address),
            'identity': self._identity_pem,
        })
        reply = self._send_frame(entry.address, message)
        if reply.type != MessageType.HELLO:
            raise ProtocolError(f'{peer_id} answered HELLO with {reply.type.value}')
        if reply.payload.get('node_id') != peer_id:
            raise ProtocolError(f'expected {peer_id} at {wire.format_address(entry.address)}, found {reply.payload.get("node_id")}')
        self._remember(peer_id, pem=reply.payload.get('identity'))
        return reply.payload['node_id']

    def hello_neighbors(self):
        reachable = {}
        for peer_id in self.config.neighbor_ids:
            try:
                self.hello(peer_id)
                reachable[peer_id] = True
            except ProtocolError as exc:
                logger.warning('Node %s: neighbor %s unreachable: %s', self.node_id, peer_id, exc)
                reachable[peer_id] = False
        return reachable

    # Server side

    def dispatch(self, message):
        handler = self._handlers.get(message.type)
        try:
            if handler is None:
                raise ProtocolError(f'{message.type.value} is not a request type')
            if message.type == MessageType.HELLO:
                self._record(message, message.payload, None)
                return handler(message, message.payload, None)
            control, ciphertext = self._open(message.payload)
            self._record(message, control, ciphertext)
            return handler(message, control, ciphertext)
        except (CNLError, KeyError, TypeError, ValueError) as exc:
            logger.warning('Node %s rejected %s from %s: %s', self.node_id, message.type.value, message.sender, exc)
            return Message(MessageType.ERROR, self.node_id, message.task_id,
                           {'error': str(exc), 'code': type(exc).__name__})

    def _reply(self, message, control, reply_type=MessageType.STATUS_REPLY, ciphertext=NO_CIPHERTEXT):
        payload = self._seal(message.sender, control, ciphertext, handshake=False)
        return Message(reply_type, self.node_id, message.task_id, payload)

    def _ack(self, message, record):
        return self._reply(message, {'state': record.state.label})

    def _on_hello(self, message, payload, _):
        self._remember(message.sender, address=wire.parse_address(payload['listen']), pem=payload['identity'])
        return Message(MessageType.HELLO, self.node_id, None, {
            'node_id': self.node_id,
            'listen': wire.format_address(self.address),
            'identity': self._identity_pem,
        })

    # Tasks

    def task_record(self, task_id):
        with self._lock:
            record = self._tasks.get(task_id)
        if record is None:
            raise UnknownTaskError(f'{self.node_id} does not know task {task_id}')
        return record

    def task_state(self, task_id):
        return self.task_record(task_id).state

    def mark_state(self, task_id, state):
        record = self.task_record(task_id)
        with self._lock:
            return record.advance(state)

    def complete_task(self, task_id):
        return self.mark_state(task_id, TaskState.DONE)

    def _register(self, task, hops):
        with self._lock:
            if task.task_id in self._tasks:
                return False
            self._tasks[task.task_id] = TaskRecord(task, hops)
            self.registration_count += 1
        logger.info('Node %s registered task %s at hop %d', self.node_id, task.task_id, hops)
        return True

    def announce_task(self, task):
        """Register locally and flood TASK_ANNOUNCE; returns once every branch has answered"""
        neighbors = self.config.neighbor_ids
        if neighbors and task.he_agency_count > len(neighbors):
            raise ConfigError(f'he_agency_count {task.he_agency_count} exceeds the {len(neighbors)} neighbors of {self.node_id}')
        if not self._register(task, 0):
            logger.info('Node %s: task %s already announced', self.node_id, task.task_id)
            return {}
        return self._forward_announce(task, 1, exclude=None)

    def _forward_announce(self, task, hops, exclude):
        results = {}
        control = {'task': task.to_dict(), 'hops': hops}

        def send(peer_id):
            try:
                self._request(peer_id, MessageType.TASK_ANNOUNCE, task.task_id, control)
                results[peer_id] = True
            except ProtocolError as exc:
                logger.warning('Node %s could not forward task %s to %s: %s', self.node_id, task.task_id, peer_id, exc)
                results[peer_id] = False

        threads = [
            threading.Thread(target=send, args=(peer_id,), daemon=True)
            for peer_id in self.config.neighbor_ids if peer_id != exclude
        ]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
        return results

    def _on_task_announce(self, message, control, _):
        task = TaskConfig.from_dict(control['task'])
        if self._register(task, int(control.get('hops', 1))):
            self._forward_announce(task, int(control.get('hops', 1)) + 1, exclude=message.sender)
        return self._ack(message, self.task_record(task.task_id))

    def task_keys(self, task_id):
        """This node's Paillier keypair for the task, generated on first use"""
        record = self.task_record(task_id)
        with record.key_lock:
            if record.keypair is None:
                record.keypair = crypto.paillier_keygen(record.config.key_bits)
                logger.info('Node %s generated a %d-bit key for task %s', self.node_id, record.keypair[0].bits, task_id)
            return record.keypair

    def share_public_key(self, task_id):
        public, _ = self.task_keys(task_id)
        control = {'target': self.node_id, 'public_key': public.to_dict()}
        delivered = {}
        for peer_id in self.config.neighbor_ids:
            try:
                self._request(peer_id, MessageType.PUBKEY_SHARE, task_id, control)
                delivered[peer_id] = True
            except ProtocolError as exc:
                logger.warning('Node %s: public key for task %s not delivered to %s: %s',
                               self.node_id, task_id, peer_id, exc)
                delivered[peer_id] = False
        return delivered

    def peer_public_key(self, task_id, target):
        record = self.task_record(task_id)
        with self._lock:
            return record.peer_keys.get(target)

    def _on_pubkey_share(self, message, control, _):
        record = self.task_record(message.task_id)
        public = crypto.PaillierPublicKey.from_dict(control['public_key'])
        with self._lock:
            previous = record.peer_keys.get(message.sender)
            if previous is not None and previous != public:
                logger.warning('Node %s: %s replaced its key for task %s', self.node_id, message.sender, message.task_id)
            record.peer_keys[message.sender] = public
        return self._ack(message, record)

    # Exchange rounds

    def _ready_event(self, record, round_index):
        with self._lock:
            return record.ready.setdefault(round_index, threading.Event())

    def publish_embedding(self, task_id, round_index, embedding):
        """Make this node's own embedding for a round available to its submit workers"""
        record = self.task_record(task_id)
        embedding = np.array(embedding, dtype=np.float64).ravel()
        if embedding.shape != (record.config.dim,):
            raise ShapeError(f'embedding of shape {embedding.shape} does not match dim {record.config.dim}')
        with self._lock:
            record.embeddings[round_index] = embedding
        self._ready_event(record, round_index).set()

    def _exchange(self, record, round_index, target):
        with self._lock:
            key = (round_index, target)
            if key not in record.exchanges:
                record.exchanges[key] = ExchangeRecord(round_index, target)
            return record.exchanges[key]

    def _directory(self, peer_ids):
        directory = {}
        for peer_id in peer_ids:
            try:
                self._identity_for(peer_id)
            except ProtocolError as exc:
                logger.warning('Node %s: leaving %s out of the directory: %s', self.node_id, peer_id, exc)
                continue
            entry = self._peer(peer_id)
            directory[peer_id] = {'addr': wire.format_address(entry.address), 'identity': entry.pem}
        return directory

    def exchange(self, task_id, round_index, embedding):
        """Run one round as target: returns the decrypted sum of the neighbors' embeddings"""
        record = self.task_record(task_id)
        task = record.config
        self.publish_embedding(task_id, round_index, embedding)
        neighbors = self.config.neighbor_ids
        if not neighbors:
            return ExchangeResult(np.zeros(task.dim), 0)
        self.task_keys(task_id)

        rng = random.Random(f'{task_id}:{round_index}:{self.node_id}')
        agencies = select_he_agencies(neighbors, task.effective_he_count(len(neighbors)), rng)
        timeout = task.effective_timeout()
        started = time.monotonic()
        notify = {
            'round': round_index,
            'target': self.node_id,
            'he_agencies': list(agencies),
            'expected': list(neighbors),
            'directory': self._directory(neighbors),
            'window_ms': int(timeout * 1000),
        }
        for peer_id in list(agencies) + [p for p in neighbors if p not in agencies]:
            try:
                self._request(peer_id, MessageType.HE_ROLE_NOTIFY, task_id, notify)
            except ProtocolError as exc:
                logger.warning('Node %s: role notification to %s failed: %s', self.node_id, peer_id, exc)
        return self.fetch_result(task_id, round_index, agencies, deadline=started + RESULT_DEADLINE_FACTOR * timeout)

    def _on_he_role_notify(self, message, control, _):
        record = self.task_record(message.task_id)
        round_index = int(control['round'])
        target = str(control['target'])
        if target != message.sender:
            raise ProtocolError('role notifications must come from the target agency')
        for peer_id, entry in control.get('directory', {}).items():
            self._remember(peer_id, address=wire.parse_address(entry['addr']), pem=entry['identity'])
        agencies = tuple(control['he_agencies'])
        expected = frozenset(control['expected'])
        window = int(control['window_ms']) / 1000.0

        if self.node_id in agencies:
            exchange = self._exchange(record, round_index, target)
            with self._lock:
                opening = exchange.expected is None
                if opening:
                    exchange.expected = expected
                    exchange.state = TaskState.AGGREGATING
                    if expected <= exchange.reported:
                        exchange.complete.set()
                record.advance(TaskState.AGGREGATING)
            if opening:
                threading.Thread(target=self._aggregation_window, args=(record, exchange, window),
                                 name=f'cnl-{self.node_id}-aggregate', daemon=True).start()
        if self.node_id in expected:
            threading.Thread(target=self._submit_when_ready, args=(record, round_index, target, agencies, window),
                             name=f'cnl-{self.node_id}-submit', daemon=True).start()
        return self._ack(message, record)

    def _submit_when_ready(self, record, round_index, target, agencies, window):
        task_id = record.config.task_id
        deadline = time.monotonic() + window
        if not self._ready_event(record, round_index).wait(window):
            logger.warning('Node %s: no embedding for task %s round %d within %.1fs', self.node_id, task_id, round_index, window)
            return
        while self.peer_public_key(task_id, target) is None and time.monotonic() < deadline:
            time.sleep(RETRY_PAUSE_SECS)
        try:
            self.submit_embedding(task_id, round_index, target, agencies)
        except CNLError as exc:
            logger.warning('Node %s: submission to %s failed: %s', self.node_id, target, exc)

    def submit_embedding(self, task_id, round_index, target, he_agencies, rng=None, embedding=None):
        """Encrypt this node's embedding under the target's key and send it to the chosen HE agencies"""
        record = self.task_record(task_id)
        public = self.peer_public_key(task_id, target)
        if public is None:
            raise ProtocolError(f'{self.node_id} has no public key from {target} for task {task_id}')
        if embedding is None:
            with self._lock:
                embedding = record.embeddings.get(round_index)
            if embedding is None:
                raise ProtocolError(f'{self.node_id} has no embedding for round {round_index}')
        rng = rng or random.Random(f'{task_id}:{round_index}:{target}:{self.node_id}')
        chosen = choose_destinations(he_agencies, rng, record.config.multi_submit)
        vector = crypto.encrypt_vector(public, embedding, crypto.FixedPointCodec(public.n))

        control = {'round': round_index, 'target': target}
        for agency in sorted(he_agencies):
            ciphertext = vector.to_dict() if agency in chosen else None
            try:
                if agency == self.node_id:
                    self._accept_submission(record, round_index, target, self.node_id, ciphertext)
                else:
                    self._request(agency, MessageType.EMB_SUBMIT, task_id, control, ciphertext=ciphertext)
            except ProtocolError as exc:
                logger.warning('Node %s: submission to HE agency %s failed: %s', self.node_id, agency, exc)
        with self._lock:
            record.advance(TaskState.SUBMITTED)
        return chosen

    def _on_emb_submit(self, message, control, ciphertext):
        record = self.task_record(message.task_id)
        self._accept_submission(record, int(control['round']), str(control['target']), message.sender, ciphertext)
        return self._ack(message, record)

    def _accept_submission(self, record, round_index, target, sender, ciphertext):
        with self._lock:
            pruned = (round_index, target) in record.finished
        if pruned:
            logger.warning('Node %s: submission from %s for finished round %d ignored', self.node_id, sender, round_index)
            return
        vector = None
        if ciphertext is not None:
            public = self.peer_public_key(record.config.task_id, target)
            if public is None:
                raise ProtocolError(f'{self.node_id} has no public key from {target}')
            vector = crypto.CiphertextVector.from_dict(ciphertext, public)
            if vector.scale_log2 != crypto.DEFAULT_SCALE_LOG2 or len(vector) != record.config.dim:
                raise CryptoError(f'submission from {sender} does not match the task encoding')
        exchange = self._exchange(record, round_index, target)
        with self._lock:
            if exchange.closed:
                logger.warning('Node %s: late submission from %s for round %d ignored', self.node_id, sender, round_index)
                return
            exchange.reported.add(sender)
            if vector is not None:
                exchange.inbox[sender] = vector
            if exchange.expected is not None and exchange.expected <= exchange.reported:
                exchange.complete.set()

    def _aggregation_window(self, record, exchange, window):
        exchange.complete.wait(window)
        try:
            self.he_aggregate_broadcast(record.config.task_id, exchange.round, exchange.target)
        except CNLError:
            logger.exception('Node %s: aggregation for %s round %d failed', self.node_id, exchange.target, exchange.round)

    def he_aggregate_broadcast(self, task_id, round_index, target):
        """Close the submission window, sum the ciphertexts and push the sum to every neighbor"""
        record = self.task_record(task_id)
        exchange = self._exchange(record, round_index, target)
        with self._lock:
            if exchange.closed:
                return exchange.state
            exchange.closed = True
            vectors = [exchange.inbox[sender] for sender in sorted(exchange.inbox)]
            missing = sorted((exchange.expected or frozenset()) - exchange.reported)
            exchange.state = max(exchange.state, TaskState.AGGREGATING)

        public = self.peer_public_key(task_id, target)
        ciphertext = None
        addend_count = 0
        if vectors:
            total = crypto.secure_sum(public, vectors)
            ciphertext = total.to_dict()
            addend_count = total.addend_count
        control = {
            'round': round_index, 'target': target,
            'addend_count': addend_count, 'partial': bool(missing), 'missing': missing,
        }
        with self._lock:
            exchange.state = TaskState.BROADCAST
            record.advance(TaskState.BROADCAST)

        delivered = False
        for peer_id in sorted(set(self.config.neighbor_ids) | {target}):
            try:
                self._request(peer_id, MessageType.SUM_BROADCAST, task_id, control, ciphertext=ciphertext)
                delivered = delivered or peer_id == target
            except ProtocolError as exc:
                logger.warning('Node %s: broadcast to %s failed: %s', self.node_id, peer_id, exc)

        with self._lock:
            exchange.inbox.clear()
            exchange.retained = None if delivered else (control, ciphertext)
            exchange.state = TaskState.DONE
        logger.info('Node %s aggregated %d addends for %s round %d%s', self.node_id, addend_count, target,
                    round_index, ' (partial)' if missing else '')
        return exchange.state

    def stored_ciphertexts(self, task_id):
        """Ciphertext vectors still held for other agencies"""
        record = self.task_record(task_id)
        with self._lock:
            return sum(len(ex.inbox) + (ex.retained is not None) for ex in record.exchanges.values())

    def _on_sum_broadcast(self, message, control, ciphertext):
        record = self.task_record(message.task_id)
        if control.get('target') != self.node_id:
            logger.debug('Node %s: ignoring sum addressed to %s', self.node_id, control.get('target'))
            return self._ack(message, record)
        public, _ = self.task_keys(message.task_id)
        share = AggregateShare.from_wire(message.sender, control, ciphertext, public)
        round_index = int(control['round'])
        with self._lock:
            if round_index <= record.assembled_round:
                logger.debug('Node %s: ignoring late sum from %s for round %d', self.node_id, message.sender, round_index)
            else:
                record.shares.setdefault(round_index, {})[message.sender] = share
        return self._ack(message, record)

    def query_status(self, peer_id, task_id, round_index=None, target=None):
        control = {}
        if round_index is not None:
            control = {'round': round_index, 'target': target}
        _, reply, _ = self._request(peer_id, MessageType.STATUS_QUERY, task_id, control)
        return TaskState.from_label(reply['state'])

    def _on_status_query(self, message, control, _):
        record = self.task_record(message.task_id)
        if control.get('round') is None:
            return self._ack(message, record)
        with self._lock:
            exchange = record.exchanges.get((int(control['round']), str(control['target'])))
            state = exchange.state if exchange is not None else TaskState.IDLE
        return self._reply(message, {'state': state.label})

    def fetch_share(self, agency, task_id, round_index):
        """Pull an aggregate the agency kept because its push to us failed"""
        _, control, ciphertext = self._request(
            agency, MessageType.RESULT_FETCH, task_id, {'round': round_index, 'target': self.node_id})
        public, _ = self.task_keys(task_id)
        return AggregateShare.from_wire(agency, control, ciphertext, public)

    def _on_result_fetch(self, message, control, _):
        record = self.task_record(message.task_id)
        key = (int(control['round']), message.sender)
        with self._lock:
            exchange = record.exchanges.get(key)
            if exchange is None or exchange.retained is None:
                raise ProtocolError(f'no retained aggregate for {message.sender} round {key[0]}')
            retained, exchange.retained = exchange.retained, None
        return self._reply(message, retained[0], MessageType.SUM_BROADCAST, ciphertext=retained[1])

    def _received_share(self, record, round_index, agency):
        with self._lock:
            return record.shares.get(round_index, {}).get(agency)

    @staticmethod
    def _prune(record, round_index):
        """Forget stored sums and delivered exchanges of rounds before the one being assembled"""
        record.assembled_round = max(record.assembled_round, round_index)
        for stale in [r for r in record.shares if r <= record.assembled_round]:
            del record.shares[stale]
        for key in [key for key, ex in record.exchanges.items()
                    if key[0] < record.assembled_round and ex.state == TaskState.DONE and ex.retained is None]:
            del record.exchanges[key]
            record.finished.add(key)

    def fetch_result(self, task_id, round_index, he_agencies, deadline=None):
        """Poll the HE agencies with backoff, then combine, decrypt and decode their sums"""
        record = self.task_record(task_id)
        if deadline is None:
            deadline = time.monotonic() + RESULT_DEADLINE_FACTOR * record.config.effective_timeout()
        delay = settings.CNL['POLL_INITIAL_SECS']
        pending = set(he_agencies)
        while pending:
            for agency in sorted(pending):
                share = self._received_share(record, round_index, agency)
                if share is None:
                    try:
                        state = self.query_status(agency, task_id, round_index, self.node_id)
                        if state == TaskState.DONE:
                            share = self._received_share(record, round_index, agency) or \
                                self.fetch_share(agency, task_id, round_index)
                    except ProtocolError as exc:
                        logger.debug('Node %s: poll of %s failed: %s', self.node_id, agency, exc)
                if share is not None:
                    with self._lock:
                        record.shares.setdefault(round_index, {})[agency] = share
                    pending.discard(agency)
            remaining = deadline - time.monotonic()
            if not pending or remaining <= 0:
                break
            time.sleep(min(delay, remaining))
            delay = min(2 * delay, settings.CNL['POLL_MAX_SECS'])
        return self._assemble(record, round_index, he_agencies, sorted(pending))

    def _assemble(self, record, round_index, he_agencies, lost):
        public, private = self.task_keys(record.config.task_id)
        with self._lock:
            shares = list(record.shares.pop(round_index, {}).values())
            self._prune(record, round_index)
        vectors = [share.vector for share in shares if share.vector is not None]
        if vectors:
            total = crypto.secure_sum(public, vectors)
            neighbor_sum = crypto.decrypt_vector(private, total, crypto.FixedPointCodec(public.n))
        else:
            neighbor_sum = np.zeros(record.config.dim)
        missing = sorted(set().union(*(share.missing for share in shares)))
        partial = bool(lost) or any(share.partial for share in shares)
        exchange = self._exchange(record, round_index, self.node_id)
        with self._lock:
            exchange.state = TaskState.DONE
        if partial:
            logger.warning('Node %s: round %d of %s is partial (missing %s, lost agencies %s)',
                           self.node_id, round_index, record.config.task_id, missing, lost)
        return ExchangeResult(
            neighbor_sum=neighbor_sum,
            addend_count=sum(share.addend_count for share in shares),
            partial=partial,
            he_agencies=tuple(he_agencies),
            missing=tuple(missing),
            lost_agencies=tuple(lost),
        )
