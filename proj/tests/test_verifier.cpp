#include <catch2/catch.hpp>

#include "helpers.hpp"

using namespace mvm;

namespace {
Program parse_ok(const std::string &text) {
    auto r = parse_assembly(text);
    if (!r.ok()) {
        std::string msg;
        for (const auto &d : r.diagnostics) msg += d.code + " ";
        FAIL("parse failed: " << msg);
    }
    return std::move(*r.program);
}

bool has_rule(const VerificationReport &r, std::string_view rule) {
    for (const auto &v : r.violations)
        if (v.rule == rule) return true;
    return false;
}
} // namespace

TEST_CASE("straight-line arithmetic is accepted with max depth 2") {
    Program p = parse_ok(".method main 0 1\n CONST 1\n CONST 2\n ADD\n STORE 0\n RETURN\n.end");
    auto r = verify(p);
    REQUIRE(r.accepted());
    CHECK(r.methods.at("main").max_depth == 2);
    CHECK(r.methods.at("main").depth[0] == 0);
    CHECK(r.methods.at("main").depth[2] == 2);
    CHECK(r.methods.at("main").depth[4] == 0);
}

TEST_CASE("nonzero stack at an invoke is a violation") {
    Program p = parse_ok(".method main 0 1\n CONST 1\n INVOKE f -> 0\n STORE 0\n RETURN\n.end\n"
                         ".method f 0 1\n RETURN 0\n.end");
    auto r = verify(p);
    REQUIRE_FALSE(r.accepted());
    CHECK(has_rule(r, rule::NonEmptyStackAtInvoke));
}

TEST_CASE("monitor opcodes require an empty stack too") {
    Program p = parse_ok(".method main 0 1\n CONST 1\n MENTER 0\n STORE 0\n RETURN\n.end");
    auto r = verify(p);
    CHECK(has_rule(r, rule::NonEmptyStackAtInvoke));
}

TEST_CASE("underflow, merge mismatch, return depth, loop header depth") {
    CHECK(has_rule(verify(parse_ok(".method main 0 1\n ADD\n RETURN\n.end")), rule::StackUnderflow));
    CHECK(has_rule(verify(parse_ok(".method main 0 1\n CONST 1\n RETURN\n.end")), rule::NonEmptyStackAtReturn));
    CHECK(has_rule(verify(parse_ok(".method main 0 1\n CONST true\n JMPIF merge\n CONST 5\n JMP merge\nmerge:\n"
                                   " STORE 0\n RETURN\n.end")),
                   rule::DepthMismatch));
    CHECK(has_rule(verify(parse_ok(".method main 0 1\n CONST 1\nhdr:\n STORE 0\n CONST 1\n CONST true\n"
                                   " JMPIF hdr\n STORE 0\n RETURN\n.end")),
                   rule::NonEmptyStackAtLoopHeader));
}

TEST_CASE("invalid jump targets and falling off the end") {
    Program p = parse_ok(".method main 0 1\n CONST 0\n STORE 0\n RETURN\n.end");
    p.methods.at("main").code[2].op = Opcode::JMP;
    p.methods.at("main").code[2].a = 99;
    CHECK(has_rule(verify(p), rule::InvalidJumpTarget));

    Program q = parse_ok(".method main 0 1\n CONST 0\n STORE 0\n RETURN\n.end");
    q.methods.at("main").code.pop_back();
    CHECK(has_rule(verify(q), rule::FallsOffEnd));
}

TEST_CASE("irreducible control flow is rejected") {
    Program p = parse_ok(".method main 0 1\n CONST true\n JMPIF inside\nheader:\n CONST true\n JMPIF exit\n"
                         "inside:\n JMP header\nexit:\n RETURN\n.end");
    auto r = verify(p);
    REQUIRE_FALSE(r.accepted());
    CHECK(has_rule(r, rule::IrreducibleLoop));
}

TEST_CASE("local indices are bounds-checked") {
    Program p = parse_ok(".method main 0 1\n LOAD 7\n STORE 0\n RETURN\n.end");
    CHECK(has_rule(verify(p), rule::LocalOutOfRange));
}

TEST_CASE("instrumented-only opcodes need the instrumented flag") {
    Program p = parse_ok(".method main 0 2\n CONST 0\n STORE 0\n RETURN\n.end");
    p.methods.at("main").code.insert(p.methods.at("main").code.begin(), make_instr(Opcode::CHECKPOINT));
    CHECK(has_rule(verify(p), rule::InstrumentedOnlyOpcode));
}

TEST_CASE("instrumented structural invariants are verified") {
    Program p = testutil::instrumented(testutil::load_corpus("counter.mvasm"));

    SECTION("tampered invoke table") {
        Program bad = p;
        bad.methods.at("main").invoke_table[1] += 1;
        CHECK(has_rule(verify(bad), rule::InvokeTableMismatch));
    }
    SECTION("tampered prologue") {
        Program bad = p;
        bad.methods.at("main").code[0] = make_instr(Opcode::CHECKPOINT);
        CHECK(has_rule(verify(bad), rule::BadPrologue));
    }
    SECTION("apcset beyond the table") {
        Program bad = p;
        bad.methods.at("main").code[3].a = 99;
        CHECK(has_rule(verify(bad), rule::ApcSetOutOfRange));
    }
}

TEST_CASE("whole corpus verifies before and after instrumentation") {
    for (const auto &name : testutil::corpus_names()) {
        Program p = testutil::load_corpus(name);
        INFO(name);
        CHECK(verify(p).accepted());
        CHECK(verify(testutil::instrumented(p)).accepted());
    }
}

TEST_CASE("dynamic stack depths match the static map on every corpus run") {
    for (const auto &name : testutil::corpus_names()) {
        Program p = testutil::load_corpus(name);
        for (const Program &variant : {testutil::instrumented(p), p}) {
            VmOptions opts;
            opts.check_static_depths = true;
            opts.allow_uninstrumented = true;
            auto vm = testutil::run_to_done(variant, opts);
            INFO(name << (variant.instrumented() ? " (instrumented)" : " (original)"));
            CHECK_FALSE(vm.trap().has_value());
            CHECK_FALSE(vm.any_live());
        }
    }
}
