"""The deployment's legal terms document and its pinned digest.

The digest of this text is embedded in the workflow rules; tenant consent is
a signature over the digest, recorded on the ledger before any proposal is
accepted from that tenant. Deployments may pin a different document via the
``terms_digest`` config key / TERMS_DIGEST env var.
"""

from .codec import sha256_hex

TERMS_TEXT = """\
RENTAL DOCUMENTATION SERVICE - TERMS AND CONDITIONS (v1)

1. The tenant authorises the service to record metadata about uploaded
   documents (content digest, filename, owner, linked house and proposal)
   on a shared tamper-evident ledger visible to the landlord organisation
   and to authorised auditors.
2. Original documents are stored off-ledger and released to a landlord only
   after the tenant grants that landlord's access request. Each grant and
   denial is itself recorded on the ledger.
3. Authorised auditors may extract the complete per-house transaction
   history, including document metadata and access decisions, for
   regulatory review.
4. Consent is expressed by digitally signing the digest of this document
   with the tenant's enrolled key. The signature is recorded on the ledger
   together with the digest it covers.
"""

TERMS_DIGEST = sha256_hex(TERMS_TEXT.encode("utf-8"))


def pinned_digest(configured: str = "") -> str:
    """The digest the contract enforces: configured override or the bundled text."""
    return configured or TERMS_DIGEST
