"""
Digests of records and record files: truncated SHA-512 over canonical JSON.
"""
import hashlib
import binascii
import json

from .const import RECORD_HEADER


def trunc512_digest(seq, offset=24):
    """
    Hex digest of the first offset bytes of the SHA-512 of a string.

    :param str seq: text to digest
    :param int offset: number of digest bytes kept
    :return str: 2 * offset hex characters
    """
    digest = hashlib.sha512(seq.encode()).digest()
    hex_digest = binascii.hexlify(digest[:offset])
    return str(hex_digest.decode())


def canonical_json(obj):
    """ Key-sorted, whitespace-free JSON; equal structures give equal text """
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def record_digest(obj, checksum_function=trunc512_digest):
    return checksum_function(canonical_json(obj))


def file_checksum(path, checksum_function=trunc512_digest):
    """
    Checksum of a record file's content lines. Header comments are skipped,
    so the digest depends on the records only.
    """
    with open(path, encoding="utf-8") as f:
        lines = [l.rstrip("\n") for l in f if not l.startswith(RECORD_HEADER.split("{")[0])]
    return checksum_function("\n".join(lines))
