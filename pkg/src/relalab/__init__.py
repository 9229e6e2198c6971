"""Seq2seq relation extraction with label-space transforms and label augmentation."""

__version__ = "0.1.0"
