from .app import AuditRecord, create_app, serve

__all__ = ["AuditRecord", "create_app", "serve"]
