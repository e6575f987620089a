import socket
import struct

from django.test import SimpleTestCase

from core import wire
from core.exceptions import ProtocolError


class MessageTests(SimpleTestCase):

    def test_frame_layout(self):
        message = wire.Message(wire.MessageType.STATUS_QUERY, 'agency-0', 't1', {'round': 0})
        frame = wire.encode_frame(message)
        (size,) = struct.unpack('>I', frame[:4])
        self.assertEqual(size, len(frame) - 4)
        decoded = wire.decode_frame(frame[4:])
        self.assertEqual(decoded.to_dict(), {'v': 1, 'type': 'STATUS_QUERY', 'task_id': 't1',
                                             'sender': 'agency-0', 'payload': {'round': 0}})

    def test_task_messages_need_task_id(self):
        with self.assertRaises(ProtocolError):
            wire.Message(wire.MessageType.EMB_SUBMIT, 'agency-0')
        self.assertIsNone(wire.Message(wire.MessageType.HELLO, 'agency-0').task_id)

    def test_unknown_version(self):
        with self.assertRaises(ProtocolError):
            wire.Message.from_dict({'v': 2, 'type': 'HELLO', 'sender': 'x'})

    def test_unknown_type(self):
        with self.assertRaises(ProtocolError):
            wire.Message.from_dict({'v': 1, 'type': 'GOSSIP', 'sender': 'x'})

    def test_garbage_body(self):
        with self.assertRaises(ProtocolError):
            wire.decode_frame(b'\xff\xfe not json')

    def test_socket_round_trip(self):
        left, right = socket.socketpair()
        with left, right:
            message = wire.Message(wire.MessageType.HELLO, 'agency-3', payload={'listen': '127.0.0.1:9'})
            wire.send_message(left, message)
            self.assertEqual(wire.recv_message(right).payload, {'listen': '127.0.0.1:9'})

    def test_closed_mid_frame(self):
        left, right = socket.socketpair()
        with right:
            left.sendall(struct.pack('>I', 100) + b'{"v":')
            left.close()
            with self.assertRaises(ProtocolError):
                wire.recv_message(right)

    def test_oversized_announcement(self):
        left, right = socket.socketpair()
        with left, right:
            left.sendall(struct.pack('>I', wire.MAX_FRAME_BYTES + 1))
            with self.assertRaises(ProtocolError):
                wire.recv_message(right)


class AddressTests(SimpleTestCase):

    def test_parse(self):
        self.assertEqual(wire.parse_address('127.0.0.1:7100'), ('127.0.0.1', 7100))
        self.assertEqual(wire.format_address(('127.0.0.1', 7100)), '127.0.0.1:7100')

    def test_bad_address(self):
        for text in ('localhost', ':80', 'host:http'):
            with self.assertRaises(ProtocolError):
                wire.parse_address(text)

    def test_base64(self):
        self.assertEqual(wire.b64decode(wire.b64encode(b'\x00\x01')), b'\x00\x01')
        with self.assertRaises(ProtocolError):
            wire.b64decode('not base64!')
