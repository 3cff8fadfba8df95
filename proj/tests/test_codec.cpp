#include <catch2/catch.hpp>

#include "helpers.hpp"

using namespace mvm;

TEST_CASE("encoding rejects a program without an entry method") {
    Program empty;
    auto r = encode_program(empty);
    REQUIRE_FALSE(r.ok());
    CHECK(r.error().code == errc::NoEntryMethod);
}

TEST_CASE("binary round-trip is identity and re-encoding is byte-identical") {
    for (const auto &name : testutil::corpus_names()) {
        Program p = testutil::load_corpus(name);
        for (const Program &variant : {p, testutil::instrumented(p)}) {
            auto bytes = encode_program(variant);
            REQUIRE(bytes.ok());
            auto decoded = decode_program(bytes.value());
            REQUIRE(decoded.ok());
            CHECK(decoded.value() == variant);
            auto again = encode_program(decoded.value());
            REQUIRE(again.ok());
            CHECK(again.value() == bytes.value());
        }
    }
}

TEST_CASE("program header is MVMP version 1") {
    Program p = testutil::load_corpus("hello.mvasm");
    auto bytes = encode_program(p);
    REQUIRE(bytes.ok());
    const auto &b = bytes.value();
    REQUIRE(b.size() > 6);
    CHECK(b[0] == 'M');
    CHECK(b[1] == 'V');
    CHECK(b[2] == 'M');
    CHECK(b[3] == 'P');
    CHECK(b[4] == 1);
    CHECK(b[5] == 0);
}

TEST_CASE("golden layout of a minimal program") {
    auto parsed = parse_assembly(".method main 0 1\n RETURN\n.end");
    REQUIRE(parsed.ok());
    auto bytes = encode_program(*parsed.program).take();
    const std::vector<uint8_t> expected_prefix = {
        'M', 'V', 'M', 'P',             // magic
        0x01, 0x00,                     // format version 1
        0x04, 0x00, 'm', 'a', 'i', 'n', // entry method
        0x00, 0x00, 0x00, 0x00,         // class count
        0x00, 0x00, 0x00, 0x00,         // global count
        0x01, 0x00, 0x00, 0x00,         // method count
        0x04, 0x00, 'm', 'a', 'i', 'n', // method name
        0x00, 0x00, 0x00, 0x00,         // param count
        0x01, 0x00, 0x00, 0x00,         // local count
        0x00,                           // instrumented flag
        0x01, 0x00, 0x00, 0x00,         // code length
        static_cast<uint8_t>(Opcode::RETURN), 0x00, // bare RETURN
    };
    REQUIRE(bytes.size() == expected_prefix.size() + 32); // + content hash
    CHECK(std::equal(expected_prefix.begin(), expected_prefix.end(), bytes.begin()));
}

TEST_CASE("golden layout of a wire frame") {
    WireMessage msg;
    msg.kind = MsgKind::status_req;
    CHECK(encode_frame(msg) == std::vector<uint8_t>{0x01, 0x00, 0x00, 0x00, 0x08});
    WireMessage err;
    err.kind = MsgKind::error;
    err.error_code = "X";
    err.error_message = "y";
    CHECK(encode_frame(err) ==
          std::vector<uint8_t>{0x07, 0x00, 0x00, 0x00, 0xff, 0x01, 0x00, 'X', 0x01, 0x00, 'y'});
}

TEST_CASE("decode failures are structured") {
    Program p = testutil::load_corpus("counter.mvasm");
    auto bytes = encode_program(p).take();

    SECTION("bad magic") {
        auto bad = bytes;
        bad[0] = 'X';
        auto r = decode_program(bad);
        REQUIRE_FALSE(r.ok());
        CHECK(r.error().code == errc::BadMagic);
    }
    SECTION("unsupported version") {
        auto bad = bytes;
        bad[4] = 9;
        auto r = decode_program(bad);
        REQUIRE_FALSE(r.ok());
        CHECK(r.error().code == errc::UnsupportedVersion);
    }
    SECTION("truncation") {
        auto bad = bytes;
        bad.resize(bad.size() - 1);
        auto r = decode_program(bad);
        REQUIRE_FALSE(r.ok());
    }
    SECTION("payload tampering is caught by the content hash") {
        for (size_t pos : {size_t{8}, bytes.size() / 2, bytes.size() - 5}) {
            auto bad = bytes;
            bad[pos] ^= 0x40;
            auto r = decode_program(bad);
            REQUIRE_FALSE(r.ok());
        }
    }
}

TEST_CASE("stored hash matches a fresh recomputation") {
    Program p = testutil::load_corpus("matmul.mvasm");
    auto h = p.content_hash;
    refresh_content_hash(p);
    CHECK(p.content_hash == h);
}
