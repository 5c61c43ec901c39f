"""Entity linking in multi-party dialogue with entity-centric recurrent models."""

__version__ = "0.1.0"
