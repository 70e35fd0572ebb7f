"""Transports behind the runtime contract: discrete-event simulator, in-process loopback, TCP sockets."""
