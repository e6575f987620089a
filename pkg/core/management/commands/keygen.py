import json
from pathlib import Path

from core import crypto
from core.exceptions import ConfigError

from ._base import CNLCommand


class Command(CNLCommand):
    help = 'Write a node identity key (RSA PEM) and/or a Paillier key pair'

    def add_arguments(self, parser):
        parser.add_argument('--identity', help='Path of the RSA identity key to create')
        parser.add_argument('--paillier', help='Path of the Paillier public key JSON to create')
        parser.add_argument('--bits', type=int, help='Paillier modulus size')
        parser.add_argument('--seed', type=int, help='Deterministic keys (test mode only)')
        parser.add_argument('--force', action='store_true', help='Overwrite existing files')

    def run(self, **options):
        if not options['identity'] and not options['paillier']:
            raise ConfigError('nothing to do: pass --identity and/or --paillier')

        if options['identity']:
            path = self._target(options['identity'], options['force'])
            key = crypto.generate_identity_key()
            crypto.save_identity_key(key, path)
            self.stdout.write(self.style.SUCCESS(f'Wrote identity key to {path}'))
            self.stdout.write(crypto.public_key_pem(key))

        if options['paillier']:
            path = self._target(options['paillier'], options['force'])
            public, private = crypto.paillier_keygen(options['bits'], seed=options['seed'])
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(public.to_dict(), sort_keys=True) + '\n', encoding='utf-8')
            secret = path.with_name(path.stem + '.private.json')
            secret.write_text(json.dumps({'p': crypto.to_hex(private.p), 'q': crypto.to_hex(private.q)},
                                         sort_keys=True) + '\n', encoding='utf-8')
            secret.chmod(0o600)
            self.stdout.write(self.style.SUCCESS(f'Wrote {public.bits}-bit Paillier key to {path} and {secret}'))

    @staticmethod
    def _target(value, force):
        path = Path(value)
        if path.exists() and not force:
            raise ConfigError(f'{path} exists; pass --force to overwrite')
        return path
