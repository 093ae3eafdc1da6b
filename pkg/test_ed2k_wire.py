"""Tests for ed2k_wire – eDonkey message codec."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import ed2k_wire
from ed2k_wire import (
    Announce,
    DecodeError,
    DecodeErrorKind,
    FileEntry,
    FileSearchAnswer,
    FileSearchQuery,
    MetaTag,
    ServerAddr,
    ServerListAnswer,
    ServerListQuery,
    ServerStatus,
    Source,
    SourceSearchAnswer,
    SourceSearchQuery,
    TagKind,
    decode_message,
    encode_message,
    validate_structure,
)

ZERO_FID = bytes(16)


# ── Strategies ───────────────────────────────────────────────────────────────

u16 = st.integers(0, 0xFFFF)
u32 = st.integers(0, 0xFFFFFFFF)
fids = st.binary(min_size=16, max_size=16)
texts = st.binary(max_size=40)

name_tags = st.builds(MetaTag, st.just(TagKind.NAME), texts)
size_tags = st.builds(MetaTag, st.just(TagKind.SIZE), u32)
type_tags = st.builds(MetaTag, st.just(TagKind.TYPE), texts)
other_tags = st.builds(MetaTag, st.just(TagKind.OTHER), texts, st.integers(0, 255))
any_tags = st.one_of(name_tags, size_tags, type_tags, other_tags)
tag_lists = st.lists(any_tags, max_size=4).map(tuple)

entries = st.builds(FileEntry, fids, tag_lists)
announced_entries = st.builds(
    lambda fid, name, size, extra: FileEntry(fid, (name, size) + extra),
    fids, name_tags, size_tags, tag_lists,
)

messages = st.one_of(
    st.just(ServerListQuery()),
    st.builds(ServerListAnswer, st.lists(st.builds(ServerAddr, u32, u16), max_size=5).map(tuple)),
    st.builds(ServerStatus, u32, u32, texts),
    st.builds(FileSearchQuery, texts, tag_lists),
    st.builds(FileSearchAnswer, st.lists(entries, max_size=4).map(tuple)),
    st.builds(SourceSearchQuery, st.lists(fids, max_size=6).map(tuple)),
    st.builds(SourceSearchAnswer, fids, st.lists(st.builds(Source, u32, u16), max_size=5).map(tuple)),
    st.builds(Announce, u32, u16, st.lists(announced_entries, max_size=4).map(tuple)),
)


# ── Structural validation ────────────────────────────────────────────────────


class TestValidateStructure:
    def test_minimal_source_search_query(self):
        payload = bytes([0xE3, 0x9A, 0x01]) + ZERO_FID
        assert validate_structure(payload) == 0x9A

    def test_declared_file_id_missing(self):
        payload = bytes([0xE3, 0x9A, 0x01]) + bytes(5)
        with pytest.raises(DecodeError) as info:
            validate_structure(payload)
        assert info.value.kind == DecodeErrorKind.STRUCTURALLY_INVALID

    def test_bad_magic(self):
        with pytest.raises(DecodeError) as info:
            validate_structure(bytes([0x42, 0x9A, 0x00]))
        assert info.value.kind == DecodeErrorKind.BAD_MAGIC

    def test_unknown_opcode(self):
        with pytest.raises(DecodeError) as info:
            validate_structure(bytes([0xE3, 0x01]))
        assert info.value.kind == DecodeErrorKind.UNKNOWN_OPCODE

    def test_empty_payload(self):
        with pytest.raises(DecodeError) as info:
            validate_structure(b"")
        assert info.value.kind == DecodeErrorKind.STRUCTURALLY_INVALID

    def test_lone_magic_byte(self):
        with pytest.raises(DecodeError) as info:
            validate_structure(b"\xe3")
        assert info.value.kind == DecodeErrorKind.STRUCTURALLY_INVALID

    def test_trailing_bytes(self):
        with pytest.raises(DecodeError) as info:
            validate_structure(bytes([0xE3, 0x14, 0x00]))
        assert info.value.kind == DecodeErrorKind.TRAILING_BYTES

    def test_unknown_tag_kind(self):
        # FileSearch.Query: empty pattern, one tag of kind 0x07
        payload = bytes([0xE3, 0x98, 0x00, 0x00, 0x01, 0x00, 0x07])
        with pytest.raises(DecodeError) as info:
            validate_structure(payload)
        assert info.value.kind == DecodeErrorKind.STRUCTURALLY_INVALID


# ── Decoding ─────────────────────────────────────────────────────────────────


class TestDecodeMessage:
    def test_zero_hash_source_search(self):
        msg = decode_message(bytes([0xE3, 0x9A, 0x01]) + ZERO_FID)
        assert msg == SourceSearchQuery((ZERO_FID,))

    def test_server_list_query(self):
        assert decode_message(b"\xe3\x14") == ServerListQuery()

    def test_announce_little_endian(self):
        payload = (
            b"\xe3\x9c" + (0x04030201).to_bytes(4, "little") + (4662).to_bytes(2, "little")
            + b"\x01\x00" + ZERO_FID + b"\x02\x00"
            + b"\x01\x03\x00abc" + b"\x02" + (1536).to_bytes(4, "little")
        )
        msg = decode_message(payload)
        assert msg == Announce(0x04030201, 4662, (
            FileEntry(ZERO_FID, (MetaTag(TagKind.NAME, b"abc"), MetaTag(TagKind.SIZE, 1536))),
        ))

    def test_announce_without_size_is_invalid(self):
        payload = (
            b"\xe3\x9c" + bytes(4) + bytes(2) + b"\x01\x00" + ZERO_FID
            + b"\x01\x00" + b"\x01\x01\x00x"
        )
        with pytest.raises(DecodeError) as info:
            decode_message(payload)
        assert info.value.kind == DecodeErrorKind.STRUCTURALLY_INVALID

    def test_other_tag_keeps_code(self):
        msg = FileSearchQuery(b"linux", (MetaTag(TagKind.OTHER, b"x", 0x15),))
        assert decode_message(encode_message(msg)) == msg

    @given(messages)
    @settings(max_examples=400)
    def test_round_trip(self, msg):
        assert decode_message(encode_message(msg)) == msg

    @given(st.binary(max_size=120))
    @settings(max_examples=1000)
    def test_total_on_random_bytes(self, payload):
        try:
            decode_message(payload)
        except DecodeError as exc:
            assert isinstance(exc.kind, DecodeErrorKind)

    @given(st.binary(max_size=80))
    @settings(max_examples=500)
    def test_validation_errors_carry_through(self, payload):
        try:
            validate_structure(payload)
        except DecodeError as exc:
            with pytest.raises(DecodeError) as info:
                decode_message(payload)
            assert info.value.kind == exc.kind

    @given(messages, st.binary(min_size=1, max_size=8))
    def test_appended_bytes_are_trailing(self, msg, extra):
        with pytest.raises(DecodeError) as info:
            decode_message(encode_message(msg) + extra)
        assert info.value.kind == DecodeErrorKind.TRAILING_BYTES


# ── Encoding ─────────────────────────────────────────────────────────────────


class TestEncodeMessage:
    def test_server_list_query(self):
        assert encode_message(ServerListQuery()) == b"\xe3\x14"

    @pytest.mark.parametrize("k", [0, 1, 5, 255])
    def test_source_search_query_length(self, k):
        payload = encode_message(SourceSearchQuery(tuple(bytes([i]) * 16 for i in range(k))))
        assert len(payload) == 3 + 16 * k

    def test_starts_with_magic_and_opcode(self):
        payload = encode_message(ServerStatus(10, 20, b"srv"))
        assert payload[:2] == b"\xe3\x16"

    def test_too_many_file_ids(self):
        with pytest.raises(ValueError):
            encode_message(SourceSearchQuery(tuple([ZERO_FID] * 256)))

    def test_too_many_servers(self):
        with pytest.raises(ValueError):
            encode_message(ServerListAnswer(tuple([ServerAddr(1, 2)] * 0x10000)))

    def test_announce_requires_name_and_size(self):
        with pytest.raises(ValueError):
            encode_message(Announce(1, 2, (FileEntry(ZERO_FID, (MetaTag(TagKind.NAME, b"a"),)),)))

    def test_short_file_id(self):
        with pytest.raises(ValueError):
            encode_message(SourceSearchQuery((b"short",)))

    def test_port_out_of_range(self):
        with pytest.raises(ValueError):
            encode_message(Announce(1, 70000, ()))

    def test_anonymized_body_rejected(self):
        with pytest.raises(ValueError):
            encode_message(FileSearchQuery("d41d8cd98f00b204e9800998ecf8427e"))


# ── Classification helpers ───────────────────────────────────────────────────


class TestHelpers:
    def test_low_id_boundary(self):
        assert ed2k_wire.is_low_id((1 << 24) - 1)
        assert not ed2k_wire.is_low_id(1 << 24)

    def test_client_id_from_ip(self):
        assert ed2k_wire.client_id_from_ip(0x01020304) == 0x04030201

    def test_families(self):
        assert ed2k_wire.family_of(ServerStatus(0, 0)) == "management"
        assert ed2k_wire.family_of(FileSearchAnswer()) == "file-search"
        assert ed2k_wire.family_of(SourceSearchAnswer(ZERO_FID)) == "source-search"
        assert ed2k_wire.family_of(Announce(1, 2)) == "announce"

    def test_message_types_are_distinct(self):
        assert len(set(ed2k_wire.MESSAGE_TYPES.values())) == 8
