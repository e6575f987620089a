import logging
import signal
import threading

from django.core.management.base import BaseCommand, CommandError

from core.exceptions import CNLError, ConfigError

logger = logging.getLogger(__name__)

EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_PARTIAL = 3


class CNLCommand(BaseCommand):
    """Maps the error hierarchy onto exit codes; subclasses implement ``run``"""

    def handle(self, *args, **options):
        try:
            return self.run(**options)
        except ConfigError as exc:
            raise CommandError(str(exc), returncode=EXIT_CONFIG) from exc
        except CNLError as exc:
            raise CommandError(f'{type(exc).__name__}: {exc}', returncode=EXIT_RUNTIME) from exc

    def run(self, **options):
        raise NotImplementedError

    def partial(self, count):
        raise CommandError(f'{count} sub-run(s) failed; results are partial', returncode=EXIT_PARTIAL)


def wait_for_shutdown(stop_event=None):
    """Block until SIGINT/SIGTERM (or the given event) asks the services to stop"""
    stop_event = stop_event or threading.Event()
    if threading.current_thread() is threading.main_thread():
        for signum in (signal.SIGINT, signal.SIGTERM):
            signal.signal(signum, lambda *_: stop_event.set())
    stop_event.wait()
    logger.info('Shutdown requested')
    return stop_event
