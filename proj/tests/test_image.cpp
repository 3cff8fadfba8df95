#include <catch2/catch.hpp>

#include <random>

#include "helpers.hpp"

using namespace mvm;

namespace {
bool same_view(const StateView &a, const StateView &b) {
    if (a.status != b.status || a.clock != b.clock || a.threads.size() != b.threads.size()) return false;
    for (size_t i = 0; i < a.threads.size(); ++i) {
        const auto &ta = a.threads[i], &tb = b.threads[i];
        if (ta.tid != tb.tid || ta.park != tb.park || ta.park_ref != tb.park_ref ||
            ta.saved_recursion != tb.saved_recursion || ta.frames.size() != tb.frames.size())
            return false;
        if (ta.park == ParkKind::sleeping && ta.sleep_deadline != tb.sleep_deadline) return false;
        for (size_t j = 0; j < ta.frames.size(); ++j) {
            const auto &fa = ta.frames[j], &fb = tb.frames[j];
            if (fa.method != fb.method || fa.pc != fb.pc || fa.apc != fb.apc || fa.locals != fb.locals) return false;
        }
    }
    return true;
}
} // namespace

TEST_CASE("capture preconditions") {
    Program p = testutil::instrumented(testutil::load_corpus("counter.mvasm"));
    auto vm = Vm::load(p);
    REQUIRE(vm.ok());
    auto r = capture(vm.value(), "x");
    REQUIRE_FALSE(r.ok());
    CHECK(r.error().code == errc::NotSuspended);

    REQUIRE(vm.value().suspend().ok());
    auto r2 = capture(vm.value(), "x"); // main is still runnable
    REQUIRE_FALSE(r2.ok());
    CHECK(r2.error().code == errc::NotAllParked);
}

TEST_CASE("image header bytes are DGEI version 1 little-endian") {
    Program p = testutil::instrumented(testutil::load_corpus("hello.mvasm"));
    auto vm = testutil::suspend_at_checkpoint(p, 1);
    REQUIRE(vm.ok());
    auto img = capture(vm.value(), "h");
    REQUIRE(img.ok());
    CHECK(img.value().threads.size() == 1);
    CHECK(img.value().threads[0].frames.size() == 1);
    CHECK(img.value().threads[0].frames[0].apc == -1);
    CHECK(img.value().heap.empty());
    auto bytes = encode_image(img.value());
    REQUIRE(bytes.size() > 6);
    CHECK(bytes[0] == 0x44);
    CHECK(bytes[1] == 0x47);
    CHECK(bytes[2] == 0x45);
    CHECK(bytes[3] == 0x49);
    CHECK(bytes[4] == 0x01);
    CHECK(bytes[5] == 0x00);
}

TEST_CASE("counter captured mid-loop carries apc and locals; restore finishes the run") {
    Program p = testutil::instrumented(testutil::load_corpus("counter.mvasm"));
    auto oracle = testutil::run_to_done(p);
    auto vm = testutil::suspend_at_checkpoint(p, 4); // i == 2
    REQUIRE(vm.ok());
    auto img = capture(vm.value(), "c");
    REQUIRE(img.ok());
    REQUIRE(img.value().threads.size() == 1);
    const auto &frame = img.value().threads[0].frames[0];
    CHECK(frame.apc == 1);
    CHECK(frame.locals[0] == Value::integer(2));

    auto restored = restore(p, img.value());
    REQUIRE(restored.ok());
    REQUIRE(restored.value().resume().ok());
    CHECK(restored.value().run() == StepOutcome::all_done);
    std::vector<Value> combined = vm.value().output_trace();
    for (const auto &v : restored.value().output_trace()) combined.push_back(v);
    CHECK(combined == oracle.output_trace());
    CHECK(state_fingerprint(restored.value()) == state_fingerprint(oracle));
}

TEST_CASE("capture is read-only and restore reproduces the inspect view exactly") {
    for (const auto &name : testutil::corpus_names()) {
        Program p = testutil::instrumented(testutil::load_corpus(name));
        for (uint64_t k : {1ull, 3ull, 7ull}) {
            auto vm = testutil::suspend_at_checkpoint(p, k);
            if (!vm.ok()) continue; // program too short for this k
            auto before = vm.value().inspect();
            auto img = capture(vm.value(), "rt");
            REQUIRE(img.ok());
            CHECK(same_view(vm.value().inspect(), before));
            auto restored = testutil::migrate_cycle(p, vm.value());
            REQUIRE(restored.ok());
            INFO(name << " k=" << k);
            CHECK(same_view(restored.value().inspect(), before));
        }
    }
}

TEST_CASE("image encoding round-trips byte-identically") {
    Program p = testutil::instrumented(testutil::load_corpus("producer_consumer.mvasm"));
    auto vm = testutil::suspend_at_checkpoint(p, 6);
    REQUIRE(vm.ok());
    auto img = capture(vm.value(), "pc");
    REQUIRE(img.ok());
    auto bytes = encode_image(img.value());
    auto decoded = decode_image(bytes);
    REQUIRE(decoded.ok());
    CHECK(encode_image(decoded.value()) == bytes);
}

TEST_CASE("decode rejects damage with structured errors") {
    Program p = testutil::instrumented(testutil::load_corpus("counter.mvasm"));
    auto vm = testutil::suspend_at_checkpoint(p, 2);
    REQUIRE(vm.ok());
    auto bytes = encode_image(capture(vm.value(), "d").value());

    SECTION("truncation") {
        auto bad = bytes;
        bad.resize(bad.size() - 1);
        auto r = decode_image(bad);
        REQUIRE_FALSE(r.ok());
        CHECK((r.error().code == errc::MalformedImage || r.error().code == errc::Truncated));
    }
    SECTION("flip one byte anywhere") {
        auto bad = bytes;
        bad[bytes.size() / 2] ^= 0x10;
        auto r = decode_image(bad);
        REQUIRE_FALSE(r.ok());
        CHECK(r.error().code == errc::MalformedImage);
        CHECK(r.error().message.find("ContentHashMismatch") != std::string::npos);
    }
}

TEST_CASE("restore validates the image against the program") {
    Program p = testutil::instrumented(testutil::load_corpus("counter.mvasm"));
    auto vm = testutil::suspend_at_checkpoint(p, 2);
    REQUIRE(vm.ok());
    auto img = capture(vm.value(), "v").take();

    SECTION("apc out of range") {
        auto bad = img;
        bad.threads[0].frames[0].apc = 99;
        auto r = restore(p, bad);
        REQUIRE_FALSE(r.ok());
        CHECK(r.error().code == errc::MalformedImage);
        CHECK(r.error().message.find("ApcOutOfRange") != std::string::npos);
    }
    SECTION("hash mismatch against a different program") {
        Program other = testutil::instrumented(testutil::load_corpus("hello.mvasm"));
        auto r = restore(other, img);
        REQUIRE_FALSE(r.ok());
        CHECK(r.error().code == errc::HashMismatch);
    }
    SECTION("unknown method") {
        auto bad = img;
        bad.threads[0].frames[0].method = "ghost";
        auto r = restore(p, bad);
        REQUIRE_FALSE(r.ok());
        CHECK(r.error().message.find("UnknownMethod") != std::string::npos);
    }
    SECTION("park kind mismatch") {
        auto bad = img;
        bad.threads[0].kind = ParkKind::sleeping;
        bad.threads[0].remaining_ms = 5;
        auto r = restore(p, bad);
        REQUIRE_FALSE(r.ok());
        CHECK(r.error().message.find("ParkKindMismatch") != std::string::npos);
    }
    SECTION("duplicate tid") {
        auto bad = img;
        bad.threads.push_back(bad.threads[0]);
        bad.next_tid = 99;
        auto r = restore(p, bad);
        REQUIRE_FALSE(r.ok());
        CHECK(r.error().message.find("DuplicateTid") != std::string::npos);
    }
    SECTION("local count mismatch") {
        auto bad = img;
        bad.threads[0].frames[0].locals.push_back(Value::null());
        auto r = restore(p, bad);
        REQUIRE_FALSE(r.ok());
        CHECK(r.error().message.find("LocalCountMismatch") != std::string::npos);
    }
}

TEST_CASE("restore validates frame linkage and monitor set membership") {
    Program p = testutil::instrumented(testutil::load_corpus("ladder.mvasm"));
    auto oracle = testutil::run_to_done(p);
    auto vm = testutil::suspend_at_checkpoint(p, 8); // deep in the recursion
    REQUIRE(vm.ok());
    auto img = capture(vm.value(), "deep").take();
    auto deepest = std::max_element(img.threads[0].frames.begin(), img.threads[0].frames.end(),
                                    [](auto &a, auto &b) { return a.apc < b.apc; });
    REQUIRE(img.threads[0].frames.size() >= 5);

    SECTION("a caller's apc must address the call site that built the next frame") {
        auto bad = img;
        bad.threads[0].frames[0].apc = 0; // the entry checkpoint, not an INVOKE
        auto r = restore(p, bad);
        REQUIRE_FALSE(r.ok());
        CHECK(r.error().message.find("BadFrameLink") != std::string::npos);
    }
    SECTION("valid deep stack restores and finishes") {
        (void)deepest;
        auto restored = testutil::migrate_cycle(p, vm.value());
        REQUIRE(restored.ok());
        restored.value().resume();
        REQUIRE(restored.value().run() == StepOutcome::all_done);
        std::vector<Value> combined = vm.value().output_trace();
        for (const auto &v : restored.value().output_trace()) combined.push_back(v);
        CHECK(combined == oracle.output_trace());
    }

    // notify_handoff parks the notifier inside the lock with the woken waiter
    // queued in the entry set, so these states are reachable by construction
    Program mon = testutil::instrumented(testutil::load_corpus("notify_handoff.mvasm"));
    uint64_t cps = testutil::run_to_done(mon).counters().checkpoints;
    ExecutionImage mimg;
    bool had_entry = false;
    for (uint64_t k = 1; k <= cps && !had_entry; ++k) {
        auto parked = testutil::suspend_at_checkpoint(mon, k);
        if (!parked.ok()) break;
        auto candidate = capture(parked.value(), "mon").take();
        for (const auto &m : candidate.monitors)
            if (!m.entry_order.empty()) {
                mimg = candidate;
                had_entry = true;
            }
    }
    REQUIRE(had_entry);
    { // an entry set without an owner is rejected
        auto bad = mimg;
        for (auto &bm : bad.monitors)
            if (!bm.entry_order.empty()) {
                bm.owner.reset();
                bm.recursion = 0;
            }
        auto r = restore(mon, bad);
        REQUIRE_FALSE(r.ok());
        CHECK(r.error().message.find("OwnerMissing") != std::string::npos);
    }
    { // a monitor-parked thread must appear in its monitor's set
        auto bad = mimg;
        for (auto &bm : bad.monitors)
            if (!bm.entry_order.empty()) bm.entry_order.clear();
        auto r = restore(mon, bad);
        REQUIRE_FALSE(r.ok());
        CHECK(r.error().message.find("SetMembershipMismatch") != std::string::npos);
    }
}

TEST_CASE("monitor snapshot: waiter order, owner, and saved recursion survive") {
    Program p = testutil::instrumented(testutil::load_corpus("producer_consumer.mvasm"));
    uint64_t checkpoints = testutil::run_to_done(p).counters().checkpoints;
    bool found_waiting_configuration = false;
    for (uint64_t k = 1; k <= checkpoints; ++k) {
        auto vm = testutil::suspend_at_checkpoint(p, k);
        if (!vm.ok()) break;
        auto img = capture(vm.value(), "w");
        REQUIRE(img.ok());
        for (const auto &mon : img.value().monitors) {
            for (const auto &w : mon.wait_order) CHECK(w.saved_recursion == 1);
            if (!mon.wait_order.empty() && mon.owner) {
                found_waiting_configuration = true;
                CHECK(mon.recursion == 1);
                CHECK(*mon.owner != mon.wait_order[0].tid);
            }
        }
        // the restored VM must agree with the image it came from
        auto restored = testutil::migrate_cycle(p, vm.value());
        REQUIRE(restored.ok());
        auto img2 = capture(restored.value(), "w");
        REQUIRE(img2.ok());
        CHECK(encode_image(img2.value()) == encode_image(img.value()));
    }
    CHECK(found_waiting_configuration); // owner holds the lock while the peer waits
}

TEST_CASE("a notified waiter in the entry set keeps its saved recursion across migration") {
    Program p = testutil::instrumented(testutil::load_corpus("notify_handoff.mvasm"));
    auto oracle = testutil::run_to_done(p);
    uint64_t checkpoints = oracle.counters().checkpoints;
    bool captured_pending_handoff = false;
    for (uint64_t k = 1; k <= checkpoints; ++k) {
        auto vm = testutil::suspend_at_checkpoint(p, k);
        if (!vm.ok()) break;
        auto img = capture(vm.value(), "h");
        REQUIRE(img.ok());
        bool has_pending = false;
        for (const auto &mon : img.value().monitors)
            for (const auto &e : mon.entry_order)
                if (e.saved_recursion > 0) has_pending = true;
        auto restored = testutil::migrate_cycle(p, vm.value());
        REQUIRE(restored.ok());
        restored.value().resume();
        REQUIRE(restored.value().run() == StepOutcome::all_done);
        std::vector<Value> combined = vm.value().output_trace();
        for (const auto &v : restored.value().output_trace()) combined.push_back(v);
        INFO("k=" << k);
        CHECK(combined == oracle.output_trace());
        if (has_pending) captured_pending_handoff = true;
    }
    CHECK(captured_pending_handoff); // the deviation-bearing state really occurs
}

TEST_CASE("relaunch order: wait-set threads first, then exec-blocked, then the rest") {
    Program p = testutil::instrumented(testutil::load_corpus("producer_consumer.mvasm"));
    uint64_t checkpoints = testutil::run_to_done(p).counters().checkpoints;
    size_t images_with_waiters = 0;
    for (uint64_t k = 1; k <= checkpoints; ++k) {
        auto vm = testutil::suspend_at_checkpoint(p, k);
        if (!vm.ok()) break;
        auto restored = testutil::migrate_cycle(p, vm.value());
        REQUIRE(restored.ok());
        int phase = 0; // 0 = waiters, 1 = exec-blocked, 2 = rest
        bool any_wait = false;
        for (const auto &e : restored.value().event_log()) {
            if (e["ev"] != "restore_thread") continue;
            std::string kind = e["kind"].get<std::string>();
            int want = kind == "monitor_wait" ? 0 : kind == "exec_blocked" ? 1 : 2;
            if (kind == "monitor_wait") any_wait = true;
            CHECK(want >= phase);
            phase = std::max(phase, want);
        }
        if (any_wait) ++images_with_waiters;
    }
    CHECK(images_with_waiters > 0);
}

TEST_CASE("recapturing a restored VM reproduces the image byte for byte") {
    for (const auto &name : testutil::corpus_names()) {
        Program p = testutil::instrumented(testutil::load_corpus(name));
        uint64_t cps = testutil::run_to_done(p).counters().checkpoints;
        for (uint64_t k = 1; k <= std::min<uint64_t>(200, cps); ++k) {
            auto parked = testutil::suspend_at_checkpoint(p, k);
            if (!parked.ok()) break;
            auto img = capture(parked.value(), "rt");
            REQUIRE(img.ok());
            auto bytes = encode_image(img.value());
            auto restored = restore(p, decode_image(bytes).take());
            REQUIRE(restored.ok());
            auto again = capture(restored.value(), "rt");
            REQUIRE(again.ok());
            INFO(name << " k=" << k);
            CHECK(encode_image(again.value()) == bytes);
        }
    }
}

TEST_CASE("two migrations in one run still reproduce the straight execution") {
    std::mt19937 rng(11);
    for (const auto &name : testutil::corpus_names()) {
        Program p = testutil::instrumented(testutil::load_corpus(name));
        auto oracle = testutil::run_to_done(p);
        uint64_t cps = oracle.counters().checkpoints;
        if (cps < 3) continue;
        for (int round = 0; round < 4; ++round) {
            uint64_t k1 = 1 + rng() % (cps - 1);
            uint64_t k2 = 1 + rng() % (cps - k1 + 1);
            auto first = testutil::suspend_at_checkpoint(p, k1);
            REQUIRE(first.ok());
            auto mid = testutil::migrate_cycle(p, first.value());
            REQUIRE(mid.ok());
            mid.value().resume();
            mid.value().arm_suspend_at_checkpoint(k2);
            StepOutcome o = mid.value().run();
            std::vector<Value> combined = first.value().output_trace();
            if (o == StepOutcome::all_parked) {
                auto last = testutil::migrate_cycle(p, mid.value());
                REQUIRE(last.ok());
                last.value().resume();
                REQUIRE(last.value().run() == StepOutcome::all_done);
                for (const auto &v : mid.value().output_trace()) combined.push_back(v);
                for (const auto &v : last.value().output_trace()) combined.push_back(v);
                INFO(name << " k1=" << k1 << " k2=" << k2);
                CHECK(state_fingerprint(last.value()) == state_fingerprint(oracle));
            } else {
                REQUIRE(o == StepOutcome::all_done); // k2 past the last checkpoint
                for (const auto &v : mid.value().output_trace()) combined.push_back(v);
                CHECK(state_fingerprint(mid.value()) == state_fingerprint(oracle));
            }
            CHECK(combined == oracle.output_trace());
        }
    }
}

TEST_CASE("sleep budget survives capture and restore exactly") {
    Program p = testutil::instrumented(testutil::load_corpus("sleeper.mvasm"));
    auto oracle = testutil::run_to_done(p);
    REQUIRE(oracle.clock() == 100);

    // suspend while the clock sits at 25: main has 75 ms left
    auto vm = Vm::load(p);
    REQUIRE(vm.ok());
    while (vm.value().clock() < 25) REQUIRE(vm.value().step() == StepOutcome::progressed);
    REQUIRE(vm.value().suspend().ok());
    while (vm.value().step() == StepOutcome::progressed) {
    }
    auto img = capture(vm.value(), "s");
    REQUIRE(img.ok());
    bool saw_sleeper = false;
    for (const auto &t : img.value().threads)
        if (t.kind == ParkKind::sleeping && t.remaining_ms == 75) saw_sleeper = true;
    CHECK(saw_sleeper);

    auto restored = restore(p, img.value());
    REQUIRE(restored.ok());
    REQUIRE(restored.value().resume().ok());
    CHECK(restored.value().run() == StepOutcome::all_done);
    CHECK(restored.value().clock() == 100); // total virtual sleep is exact
    std::vector<Value> combined = vm.value().output_trace();
    for (const auto &v : restored.value().output_trace()) combined.push_back(v);
    CHECK(combined == oracle.output_trace());
}
