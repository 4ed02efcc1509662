"""Real-time streaming: wire protocol, server pipeline and replay client."""
