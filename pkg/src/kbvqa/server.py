"""
Contains the EPC server that answers knowledge base questions for remote clients.
"""
import logging

import epc.handler
import epc.server

__all__ = ['Server']

logger = logging.getLogger(__name__)


class Server(epc.server.EPCServer):
    """EPC server for question answering clients.

    Remote functions come from a :class:`provider <kbvqa.ProviderBase>` plus
    :meth:`set_logging_level`. The registry is rebuilt on every
    :meth:`kbvqa.Server.set_provider` call and whenever
    :meth:`kbvqa.ChainedProvider.add_provider` plugs in new methods.
    """
    allow_reuse_address = True

    def __init__(self, server_address=('localhost', 0), RequestHandlerClass=epc.handler.EPCHandler):
        """Bind to ``server_address``, port ``0`` picks a free port.

        :param server_address: host and port
        :type server_address: tuple
        :param RequestHandlerClass: the handler class to use
        :type RequestHandlerClass: :class:`epc.server.EPCHandler`
        """
        epc.server.EPCServer.__init__(self, server_address, RequestHandlerClass=RequestHandlerClass, log_traceback=True)
        self._provider = None
        self._set_funcs()

    def _set_funcs(self):
        self.funcs = {}
        self.register_function(self.set_logging_level)
        if self._provider:
            for name, f in self._provider._get_methods().items():
                self.register_function(f, name=name)
        logger.debug("registered functions: %s", sorted(self.funcs))

    def set_logging_level(self, level):
        """Set the level of the server logger and of the ``kbvqa`` package logger.

        Clients lower it to ``DEBUG`` to follow retrieval and memory filling remotely.

        :param level: a level name like ``DEBUG`` or ``WARNING``, or an integer
        :type level: :class:`str` | :class:`int`
        :raises: :class:`ValueError` for unknown level names

        .. doctest::

            >>> import logging
            >>> import kbvqa
            >>> server = kbvqa.Server()
            >>> server.set_logging_level("DEBUG")
            >>> server.set_logging_level(logging.INFO)
            >>> server.logger.level
            20
            >>> server.server_close()
        """
        if isinstance(level, str):
            if not isinstance(getattr(logging, level, None), int):
                raise ValueError("Invalid logging level %s" % level)
            level = getattr(logging, level)
        self.logger.setLevel(level)
        logging.getLogger('kbvqa').setLevel(level)

    def get_provider(self):
        """The :class:`kbvqa.ProviderBase` whose methods are registered."""
        return self._provider

    def set_provider(self, provider):
        """Register the methods of ``provider`` in place of the current ones.

        :type provider: :class:`kbvqa.ProviderBase`
        """
        logger.debug("setting provider to %s", provider)
        self._provider = provider
        self._set_funcs()
