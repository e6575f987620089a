"""
Framing and envelope codec for node-to-node messages.

A frame is a 4-byte big-endian unsigned length followed by a UTF-8 JSON
object ``{"v":1,"type":...,"task_id":...,"sender":...,"payload":{...}}``.
"""
import base64
import enum
import json
import socket
import struct
from dataclasses import dataclass, field

from .exceptions import ProtocolError

PROTOCOL_VERSION = 1
HEADER = struct.Struct('>I')
MAX_FRAME_BYTES = 16 * 1024 * 1024


class MessageType(str, enum.Enum):
    HELLO = 'HELLO'
    TASK_ANNOUNCE = 'TASK_ANNOUNCE'
    PUBKEY_SHARE = 'PUBKEY_SHARE'
    HE_ROLE_NOTIFY = 'HE_ROLE_NOTIFY'
    EMB_SUBMIT = 'EMB_SUBMIT'
    SUM_BROADCAST = 'SUM_BROADCAST'
    STATUS_QUERY = 'STATUS_QUERY'
    STATUS_REPLY = 'STATUS_REPLY'
    RESULT_FETCH = 'RESULT_FETCH'
    ERROR = 'ERROR'


# Sent before any identity keys are known, so never sealed
PLAIN_TYPES = frozenset({MessageType.HELLO, MessageType.ERROR})


@dataclass
class Message:
    type: MessageType
    sender: str
    task_id: str = None
    payload: dict = field(default_factory=dict)
    version: int = PROTOCOL_VERSION

    def __post_init__(self):
        self.type = MessageType(self.type)
        if self.task_id is None and self.type not in PLAIN_TYPES:
            raise ProtocolError(f'{self.type.value} message needs a task_id')

    def to_dict(self):
        return {
            'v': self.version,
            'type': self.type.value,
            'task_id': self.task_id,
            'sender': self.sender,
            'payload': self.payload,
        }

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ProtocolError('message must be a JSON object')
        if data.get('v') != PROTOCOL_VERSION:
            raise ProtocolError(f'unsupported protocol version {data.get("v")!r}')
        try:
            return cls(
                type=MessageType(data['type']),
                sender=str(data['sender']),
                task_id=data.get('task_id'),
                payload=data.get('payload') or {},
            )
        except (KeyError, ValueError) as exc:
            raise ProtocolError(f'malformed message: {exc}') from exc


def encode_frame(message):
    body = json.dumps(message.to_dict(), separators=(',', ':')).encode('utf-8')
    if len(body) > MAX_FRAME_BYTES:
        raise ProtocolError(f'frame of {len(body)} bytes exceeds {MAX_FRAME_BYTES}')
    return HEADER.pack(len(body)) + body


def decode_frame(body):
    try:
        return Message.from_dict(json.loads(body.decode('utf-8')))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f'frame is not UTF-8 JSON: {exc}') from exc


def _recv_exact(sock, size):
    chunks = []
    remaining = size
    while remaining:
        chunk = sock.recv(min(remaining, 65536))
        if not chunk:
            raise ProtocolError('connection closed mid-frame')
        chunks.append(chunk)
        remaining -= len(chunk)
    return b''.join(chunks)


def send_message(sock, message):
    sock.sendall(encode_frame(message))


def recv_message(sock):
    (size,) = HEADER.unpack(_recv_exact(sock, HEADER.size))
    if size > MAX_FRAME_BYTES:
        raise ProtocolError(f'peer announced a {size}-byte frame')
    return decode_frame(_recv_exact(sock, size))


def request(address, message, timeout):
    """One request frame, one reply frame, then the connection closes"""
    with socket.create_connection(address, timeout=timeout) as sock:
        send_message(sock, message)
        return recv_message(sock)


def b64encode(data):
    return base64.b64encode(data).decode('ascii')


def b64decode(text):
    try:
        return base64.b64decode(text.encode('ascii'), validate=True)
    except (AttributeError, ValueError) as exc:
        raise ProtocolError('sealed payload is not valid base64') from exc


def parse_address(text):
    """'host:port' -> (host, port)"""
    host, sep, port = str(text).rpartition(':')
    if not sep or not host or not port.isdigit():
        raise ProtocolError(f'address must look like host:port, got {text!r}')
    return host, int(port)


def format_address(address):
    return f'{address[0]}:{address[1]}'
