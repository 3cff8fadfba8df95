#pragma once

// Portable execution images ("DGEI"): the full suspended state of a VM —
// threads with their frame stacks (method, apc, locals; never the pc),
// mobile monitors with owner/recursion and both FIFO orders, heap, globals,
// and the virtual clock. Restoration rebuilds frames bottom-up, recomputes
// every pc by dispatching on the seeded apc, and re-parks each thread in its
// recorded kind using the DGET relaunch order: wait-set threads first,
// then execution-blocked ones, then everything else.

#include <algorithm>

#include "mvm/bytes.hpp"
#include "mvm/sha256.hpp"
#include "mvm/vm.hpp"

namespace mvm {

inline constexpr std::array<uint8_t, 4> kImageMagic = {'D', 'G', 'E', 'I'};
inline constexpr uint16_t kImageFormatVersion = 1;

struct ImageFrame {
    std::string method;
    int32_t apc = -1;
    std::vector<Value> locals;
};

struct ImageThread {
    uint32_t tid = 0;
    ParkKind kind = ParkKind::exec_blocked; // one of the four park states
    uint32_t ref = 0;                       // monitor_entry / monitor_wait
    int64_t remaining_ms = 0;               // sleeping: time left, not a deadline
    std::vector<ImageFrame> frames;         // bottom -> top
};

struct ImageMonitorWaiter {
    uint32_t tid = 0;
    uint32_t saved_recursion = 0; // entry records: 0 = plain enter, >0 = notified waiter
};

struct ImageMonitor {
    uint32_t object_ref = 0;
    std::optional<uint32_t> owner;
    uint32_t recursion = 0;
    std::vector<ImageMonitorWaiter> entry_order;
    std::vector<ImageMonitorWaiter> wait_order;
};

struct ExecutionImage {
    std::string entity_id;
    std::array<uint8_t, 32> program_hash{};
    int64_t clock = 0;
    uint32_t next_tid = 0;
    std::map<std::string, Value> globals;
    std::vector<HeapObject> heap;        // ascending id
    std::vector<ImageMonitor> monitors;  // ascending object ref
    std::vector<ImageThread> threads;    // ascending tid
};

namespace detail {

inline void encode_heap_object(ByteWriter &w, const HeapObject &obj) {
    w.u32(obj.id);
    w.str(obj.class_name);
    w.u32(static_cast<uint32_t>(obj.fields.size()));
    for (const auto &[name, v] : obj.fields) {
        w.str(name);
        w.value(v);
    }
}

inline Result<HeapObject> decode_heap_object(ByteReader &r) {
    HeapObject obj;
    auto id = r.u32();
    if (!id) return id.error();
    obj.id = id.value();
    auto cls = r.str();
    if (!cls) return cls.error();
    obj.class_name = cls.take();
    auto count = r.u32();
    if (!count) return count.error();
    if (count.value() > r.remaining()) return make_error(errc::Truncated, "field map exceeds payload");
    for (uint32_t i = 0; i < count.value(); ++i) {
        auto name = r.str();
        if (!name) return name.error();
        auto v = r.value();
        if (!v) return v.error();
        obj.fields.emplace(name.take(), v.take());
    }
    return obj;
}

} // namespace detail

inline std::vector<uint8_t> encode_image_body(const ExecutionImage &img) {
    ByteWriter w;
    w.raw(kImageMagic.data(), kImageMagic.size());
    w.u16(kImageFormatVersion);
    w.str(img.entity_id);
    w.raw(img.program_hash.data(), img.program_hash.size());
    w.u8(1); // control status: always SUSPENDED
    w.i64(img.clock);
    w.u32(img.next_tid);
    w.u32(static_cast<uint32_t>(img.globals.size()));
    for (const auto &[name, v] : img.globals) {
        w.str(name);
        w.value(v);
    }
    w.u32(static_cast<uint32_t>(img.heap.size()));
    for (const auto &obj : img.heap) detail::encode_heap_object(w, obj);
    w.u32(static_cast<uint32_t>(img.monitors.size()));
    for (const auto &mon : img.monitors) {
        w.u32(mon.object_ref);
        w.u8(mon.owner ? 1 : 0);
        if (mon.owner) w.u32(*mon.owner);
        w.u32(mon.recursion);
        w.u32(static_cast<uint32_t>(mon.entry_order.size()));
        for (const auto &e : mon.entry_order) {
            w.u32(e.tid);
            w.u32(e.saved_recursion);
        }
        w.u32(static_cast<uint32_t>(mon.wait_order.size()));
        for (const auto &e : mon.wait_order) {
            w.u32(e.tid);
            w.u32(e.saved_recursion);
        }
    }
    w.u32(static_cast<uint32_t>(img.threads.size()));
    for (const auto &t : img.threads) {
        w.u32(t.tid);
        w.u8(static_cast<uint8_t>(t.kind));
        if (t.kind == ParkKind::monitor_entry || t.kind == ParkKind::monitor_wait) w.u32(t.ref);
        if (t.kind == ParkKind::sleeping) w.i64(t.remaining_ms);
        w.u32(static_cast<uint32_t>(t.frames.size()));
        for (const auto &fr : t.frames) {
            w.str(fr.method);
            w.i64(fr.apc);
            w.u32(static_cast<uint32_t>(fr.locals.size()));
            for (const auto &v : fr.locals) w.value(v);
        }
    }
    return w.take();
}

inline std::vector<uint8_t> encode_image(const ExecutionImage &img) {
    auto body = encode_image_body(img);
    auto digest = sha256(body);
    body.insert(body.end(), digest.begin(), digest.end());
    return body;
}

inline Result<ExecutionImage> decode_image(const std::vector<uint8_t> &bytes) {
    if (bytes.size() < 32 + 6) return make_error(errc::Truncated, "image shorter than header and hash");
    {
        auto computed = sha256(bytes.data(), bytes.size() - 32);
        if (!std::equal(computed.begin(), computed.end(), bytes.end() - 32))
            return make_error(errc::MalformedImage, "ContentHashMismatch: image bytes were altered");
    }
    ByteReader r(bytes.data(), bytes.size() - 32);
    auto magic = r.blob(4);
    if (!magic) return magic.error();
    if (!std::equal(magic.value().begin(), magic.value().end(), kImageMagic.begin()))
        return make_error(errc::BadMagic, "not a DGEI image");
    auto version = r.u16();
    if (!version) return version.error();
    if (version.value() != kImageFormatVersion)
        return make_error(errc::UnsupportedVersion, "image format version " + std::to_string(version.value()));
    ExecutionImage img;
    auto eid = r.str();
    if (!eid) return eid.error();
    img.entity_id = eid.take();
    auto hash = r.blob(32);
    if (!hash) return hash.error();
    std::copy(hash.value().begin(), hash.value().end(), img.program_hash.begin());
    auto status = r.u8();
    if (!status) return status.error();
    if (status.value() != 1)
        return make_error(errc::MalformedImage, "StatusNotSuspended: images must carry SUSPENDED control state");
    auto clk = r.i64();
    if (!clk) return clk.error();
    if (clk.value() < 0) return make_error(errc::MalformedImage, "NegativeClock: clock " + std::to_string(clk.value()));
    img.clock = clk.value();
    auto ntid = r.u32();
    if (!ntid) return ntid.error();
    img.next_tid = ntid.value();

    auto gcount = r.u32();
    if (!gcount) return gcount.error();
    for (uint32_t i = 0; i < gcount.value(); ++i) {
        auto name = r.str();
        if (!name) return name.error();
        auto v = r.value();
        if (!v) return v.error();
        img.globals.emplace(name.take(), v.take());
    }
    auto hcount = r.u32();
    if (!hcount) return hcount.error();
    for (uint32_t i = 0; i < hcount.value(); ++i) {
        auto obj = detail::decode_heap_object(r);
        if (!obj) return obj.error();
        img.heap.push_back(obj.take());
    }
    auto mcount = r.u32();
    if (!mcount) return mcount.error();
    for (uint32_t i = 0; i < mcount.value(); ++i) {
        ImageMonitor mon;
        auto ref = r.u32();
        if (!ref) return ref.error();
        mon.object_ref = ref.value();
        auto has_owner = r.u8();
        if (!has_owner) return has_owner.error();
        if (has_owner.value() > 1) return make_error(errc::BadEncoding, "bad owner flag");
        if (has_owner.value()) {
            auto owner = r.u32();
            if (!owner) return owner.error();
            mon.owner = owner.value();
        }
        auto rec = r.u32();
        if (!rec) return rec.error();
        mon.recursion = rec.value();
        for (auto *list : {&mon.entry_order, &mon.wait_order}) {
            auto count = r.u32();
            if (!count) return count.error();
            if (count.value() > r.remaining()) return make_error(errc::Truncated, "monitor list exceeds payload");
            for (uint32_t j = 0; j < count.value(); ++j) {
                auto tid = r.u32();
                if (!tid) return tid.error();
                auto saved = r.u32();
                if (!saved) return saved.error();
                list->push_back(ImageMonitorWaiter{tid.value(), saved.value()});
            }
        }
        img.monitors.push_back(std::move(mon));
    }
    auto tcount = r.u32();
    if (!tcount) return tcount.error();
    for (uint32_t i = 0; i < tcount.value(); ++i) {
        ImageThread t;
        auto tid = r.u32();
        if (!tid) return tid.error();
        t.tid = tid.value();
        auto kind = r.u8();
        if (!kind) return kind.error();
        if (kind.value() < 1 || kind.value() > 4)
            return make_error(errc::MalformedImage, "BadParkKind: " + std::to_string(kind.value()));
        t.kind = static_cast<ParkKind>(kind.value());
        if (t.kind == ParkKind::monitor_entry || t.kind == ParkKind::monitor_wait) {
            auto ref = r.u32();
            if (!ref) return ref.error();
            t.ref = ref.value();
        }
        if (t.kind == ParkKind::sleeping) {
            auto rem = r.i64();
            if (!rem) return rem.error();
            if (rem.value() < 0)
                return make_error(errc::MalformedImage, "NegativeRemaining: " + std::to_string(rem.value()));
            t.remaining_ms = rem.value();
        }
        auto fcount = r.u32();
        if (!fcount) return fcount.error();
        if (fcount.value() > r.remaining()) return make_error(errc::Truncated, "frame list exceeds payload");
        for (uint32_t j = 0; j < fcount.value(); ++j) {
            ImageFrame fr;
            auto mname = r.str();
            if (!mname) return mname.error();
            fr.method = mname.take();
            auto apc = r.i64();
            if (!apc) return apc.error();
            fr.apc = static_cast<int32_t>(apc.value());
            auto lcount = r.u32();
            if (!lcount) return lcount.error();
            if (lcount.value() > r.remaining()) return make_error(errc::Truncated, "locals exceed payload");
            for (uint32_t k = 0; k < lcount.value(); ++k) {
                auto v = r.value();
                if (!v) return v.error();
                fr.locals.push_back(v.take());
            }
            t.frames.push_back(std::move(fr));
        }
        img.threads.push_back(std::move(t));
    }
    if (!r.at_end()) return make_error(errc::TrailingBytes, "bytes after image payload");
    return img;
}

/// Capture/restore need the Vm's internals; everything funnels through here.
struct ImageOps {
    static Result<ExecutionImage> capture(const Vm &vm, const std::string &entity_id) {
        if (vm.control_.status != ExecStatus::suspended)
            return make_error(errc::NotSuspended, "capture requires a suspended VM");
        if (vm.trap_) return make_error(errc::NotAllParked, "entity trapped; nothing to capture");
        for (const auto &[tid, t] : vm.threads_)
            if (t.park == ParkKind::runnable)
                return make_error(errc::NotAllParked, "thread " + std::to_string(tid) + " is still runnable");

        ExecutionImage img;
        img.entity_id = entity_id;
        img.program_hash = vm.program_.content_hash;
        img.clock = vm.clock_;
        img.next_tid = vm.next_tid_;
        img.globals = vm.globals_;
        for (const auto &[_, obj] : vm.heap_) img.heap.push_back(obj);
        for (const auto &[ref, mon] : vm.monitors_) {
            if (!mon.owner && mon.entry_set.empty() && mon.wait_set.empty()) continue;
            ImageMonitor im;
            im.object_ref = ref;
            im.owner = mon.owner;
            im.recursion = mon.recursion;
            for (uint32_t tid : mon.entry_set)
                im.entry_order.push_back(ImageMonitorWaiter{tid, vm.threads_.at(tid).saved_recursion});
            for (uint32_t tid : mon.wait_set)
                im.wait_order.push_back(ImageMonitorWaiter{tid, vm.threads_.at(tid).saved_recursion});
            img.monitors.push_back(std::move(im));
        }
        for (const auto &[tid, t] : vm.threads_) {
            if (!t.live()) continue;
            ImageThread it;
            it.tid = tid;
            it.kind = t.park;
            if (t.park == ParkKind::monitor_entry || t.park == ParkKind::monitor_wait) it.ref = t.park_ref;
            if (t.park == ParkKind::sleeping) it.remaining_ms = t.sleep_deadline - vm.clock_;
            for (const auto &fr : t.frames) it.frames.push_back(ImageFrame{fr.method, fr.apc, fr.locals});
            img.threads.push_back(std::move(it));
        }
        return img;
    }

    static Result<Vm> restore(const Program &program, const ExecutionImage &img, VmOptions opts = {}) {
        if (!program.instrumented())
            return make_error(errc::NotInstrumented, "restore requires an instrumented program");
        if (program.content_hash != img.program_hash)
            return make_error(errc::HashMismatch, "image was captured from a different program");
        if (auto v = validate(program, img); !v) return v.error();

        Vm vm;
        vm.opts_ = opts;
        vm.program_ = program;
        vm.control_.status = ExecStatus::suspended;
        vm.clock_ = img.clock;
        vm.next_tid_ = img.next_tid;
        vm.globals_ = img.globals;
        uint32_t max_ref = 0;
        for (const auto &obj : img.heap) {
            max_ref = std::max(max_ref, obj.id);
            vm.heap_.emplace(obj.id, obj);
        }
        vm.next_ref_ = max_ref + 1;
        for (const auto &im : img.monitors) {
            MobileMonitor mon;
            mon.object_ref = im.object_ref;
            mon.owner = im.owner;
            mon.recursion = im.recursion;
            vm.monitors_.emplace(im.object_ref, std::move(mon)); // sets repopulated by re-parking
        }

        std::map<uint32_t, const ImageThread *> by_tid;
        for (const auto &t : img.threads) by_tid[t.tid] = &t;

        // relaunch order: wait-set threads, execution-blocked threads, then
        // the rest (entry sets in order, then sleepers)
        auto relaunch = [&](const ImageThread &t, uint32_t saved_recursion) {
            ThreadCtx ctx;
            ctx.tid = t.tid;
            for (const auto &fr : t.frames) {
                const MethodDef &m = program.methods.at(fr.method);
                Frame f;
                f.method = fr.method;
                f.locals = fr.locals;
                f.apc = fr.apc;
                // recompute the pc from the apc exactly as DISPATCH would
                f.pc = fr.apc < 0 ? kEntryCheckpointPc : m.invoke_table[static_cast<uint32_t>(fr.apc)];
                ctx.frames.push_back(std::move(f));
            }
            ctx.saved_recursion = saved_recursion;
            ctx.resuming_wait = saved_recursion > 0;
            vm.log_event({{"ev", "restore_thread"}, {"tid", t.tid}, {"kind", std::string(park_kind_name(t.kind))}});
            auto [it, _] = vm.threads_.emplace(t.tid, std::move(ctx));
            ThreadCtx &live = it->second;
            switch (t.kind) {
            case ParkKind::monitor_wait:
                vm.monitors_.at(t.ref).wait_set.push_back(t.tid);
                vm.park(live, ParkKind::monitor_wait, t.ref);
                break;
            case ParkKind::exec_blocked:
                vm.park(live, ParkKind::exec_blocked);
                break;
            case ParkKind::monitor_entry:
                vm.monitors_.at(t.ref).entry_set.push_back(t.tid);
                vm.park(live, ParkKind::monitor_entry, t.ref);
                break;
            case ParkKind::sleeping:
                vm.park(live, ParkKind::sleeping, 0, vm.clock_ + t.remaining_ms);
                break;
            default: break;
            }
        };

        std::set<uint32_t> done;
        for (const auto &im : img.monitors)
            for (const auto &e : im.wait_order)
                if (done.insert(e.tid).second) relaunch(*by_tid.at(e.tid), e.saved_recursion);
        for (const auto &t : img.threads)
            if (t.kind == ParkKind::exec_blocked && done.insert(t.tid).second) relaunch(t, 0);
        for (const auto &im : img.monitors)
            for (const auto &e : im.entry_order)
                if (done.insert(e.tid).second) relaunch(*by_tid.at(e.tid), e.saved_recursion);
        for (const auto &t : img.threads)
            if (t.kind == ParkKind::sleeping && done.insert(t.tid).second) relaunch(t, 0);
        vm.log_event({{"ev", "restore_done"}});
        return vm;
    }

    /// Program-aware invariant checks; the violated rule leads the message.
    static Result<void> validate(const Program &program, const ExecutionImage &img) {
        auto fail = [](std::string_view rule, std::string detail) {
            return make_error(errc::MalformedImage, std::string(rule) + ": " + std::move(detail));
        };
        std::map<uint32_t, const ImageThread *> by_tid;
        for (const auto &t : img.threads) {
            if (by_tid.count(t.tid)) return fail("DuplicateTid", "thread " + std::to_string(t.tid));
            by_tid[t.tid] = &t;
            if (t.tid >= img.next_tid) return fail("BadTidCounter", "tid " + std::to_string(t.tid) + " beyond nextTid");
        }
        uint32_t prev_id = 0;
        for (const auto &obj : img.heap) {
            if (obj.id <= prev_id) return fail("BadHeapOrder", "heap ids must ascend from 1");
            prev_id = obj.id;
            auto cls = program.classes.find(obj.class_name);
            if (cls == program.classes.end()) return fail("UnknownClass", obj.class_name);
            if (obj.fields.size() != cls->second.size()) return fail("BadHeapObject", "field set mismatch");
            for (const auto &fname : cls->second)
                if (!obj.fields.count(fname)) return fail("BadHeapObject", "missing field '" + fname + "'");
        }
        for (const auto &[name, _] : img.globals)
            if (!std::binary_search(program.globals.begin(), program.globals.end(), name))
                return fail("GlobalsMismatch", "undeclared global '" + name + "'");
        for (const auto &g : program.globals)
            if (!img.globals.count(g)) return fail("GlobalsMismatch", "missing global '" + g + "'");

        for (const auto &t : img.threads) {
            if (t.frames.empty()) return fail("EmptyThread", "thread " + std::to_string(t.tid));
            for (size_t i = 0; i < t.frames.size(); ++i) {
                const auto &fr = t.frames[i];
                const MethodDef *m = program.find_method(fr.method);
                if (!m) return fail("UnknownMethod", fr.method);
                if (fr.locals.size() != m->local_count)
                    return fail("LocalCountMismatch", fr.method + " expects " + std::to_string(m->local_count) +
                                                          " locals, image has " + std::to_string(fr.locals.size()));
                if (fr.apc < -1 || fr.apc >= static_cast<int64_t>(m->invoke_table.size()))
                    return fail("ApcOutOfRange", "apc " + std::to_string(fr.apc) + " in " + fr.method);
                bool top = i + 1 == t.frames.size();
                if (!top) {
                    if (fr.apc < 0) return fail("BadFrameLink", "non-top frame with sentinel apc");
                    const Instruction &site = m->code[m->invoke_table[static_cast<uint32_t>(fr.apc)]];
                    if (site.op != Opcode::INVOKE && site.op != Opcode::SPAWN)
                        return fail("BadFrameLink", "apc does not address a call site");
                    if (site.sym != t.frames[i + 1].method)
                        return fail("BadFrameLink", "call site binds '" + site.sym + "', image has '" +
                                                        t.frames[i + 1].method + "'");
                } else {
                    uint32_t pc = fr.apc < 0 ? kEntryCheckpointPc : m->invoke_table[static_cast<uint32_t>(fr.apc)];
                    Opcode op = m->code[pc].op;
                    bool ok = false;
                    switch (t.kind) {
                    case ParkKind::exec_blocked: ok = op == Opcode::CHECKPOINT; break;
                    case ParkKind::monitor_entry: ok = op == Opcode::MINVOKE_ENTER || op == Opcode::MINVOKE_WAIT; break;
                    case ParkKind::monitor_wait: ok = op == Opcode::MINVOKE_WAIT; break;
                    case ParkKind::sleeping: ok = op == Opcode::SLEEP; break;
                    default: break;
                    }
                    if (!ok)
                        return fail("ParkKindMismatch", "thread " + std::to_string(t.tid) + " parked " +
                                                            std::string(park_kind_name(t.kind)) + " at " +
                                                            std::string(opcode_name(op)));
                }
            }
        }

        std::set<uint32_t> heap_ids;
        for (const auto &obj : img.heap) heap_ids.insert(obj.id);
        uint32_t prev_ref = 0;
        bool first_mon = true;
        for (const auto &im : img.monitors) {
            if (!first_mon && im.object_ref <= prev_ref) return fail("BadMonitorOrder", "monitor refs must ascend");
            first_mon = false;
            prev_ref = im.object_ref;
            if (!heap_ids.count(im.object_ref))
                return fail("DanglingMonitor", "ref#" + std::to_string(im.object_ref));
            if (im.owner && !by_tid.count(*im.owner))
                return fail("UnknownTid", "monitor owner " + std::to_string(*im.owner));
            if ((im.owner && im.recursion == 0) || (!im.owner && im.recursion != 0))
                return fail("BadRecursion", "owner and recursion disagree");
            if (!im.entry_order.empty() && !im.owner)
                return fail("OwnerMissing", "entry set without an owner on ref#" + std::to_string(im.object_ref));
            for (const auto &e : im.entry_order) {
                auto it = by_tid.find(e.tid);
                if (it == by_tid.end()) return fail("UnknownTid", "entry tid " + std::to_string(e.tid));
                if (it->second->kind != ParkKind::monitor_entry || it->second->ref != im.object_ref)
                    return fail("SetMembershipMismatch", "tid " + std::to_string(e.tid) + " not entry-parked here");
                if (im.owner && *im.owner == e.tid) return fail("OwnerEntryConflict", "owner queued on its own lock");
            }
            for (const auto &e : im.wait_order) {
                auto it = by_tid.find(e.tid);
                if (it == by_tid.end()) return fail("UnknownTid", "wait tid " + std::to_string(e.tid));
                if (it->second->kind != ParkKind::monitor_wait || it->second->ref != im.object_ref)
                    return fail("SetMembershipMismatch", "tid " + std::to_string(e.tid) + " not wait-parked here");
                if (e.saved_recursion == 0) return fail("BadSavedRecursion", "waiter with zero saved recursion");
                if (im.owner && *im.owner == e.tid) return fail("OwnerEntryConflict", "owner waiting on its own lock");
            }
        }
        // every monitor-parked thread must appear in its monitor's set
        for (const auto &t : img.threads) {
            if (t.kind != ParkKind::monitor_entry && t.kind != ParkKind::monitor_wait) continue;
            bool found = false;
            for (const auto &im : img.monitors) {
                if (im.object_ref != t.ref) continue;
                const auto &list = t.kind == ParkKind::monitor_entry ? im.entry_order : im.wait_order;
                for (const auto &e : list)
                    if (e.tid == t.tid) found = true;
            }
            if (!found)
                return fail("SetMembershipMismatch",
                            "tid " + std::to_string(t.tid) + " missing from monitor ref#" + std::to_string(t.ref));
        }
        return {};
    }
};

inline Result<ExecutionImage> capture(const Vm &vm, const std::string &entity_id) {
    return ImageOps::capture(vm, entity_id);
}

inline Result<Vm> restore(const Program &program, const ExecutionImage &img, VmOptions opts = {}) {
    return ImageOps::restore(program, img, opts);
}

/// Canonical bytes of the observable final state (clock, globals, heap);
/// the migrate-at-every-checkpoint oracle compares these.
inline std::vector<uint8_t> state_fingerprint(const Vm &vm) {
    ByteWriter w;
    w.i64(vm.clock());
    w.u32(static_cast<uint32_t>(vm.globals().size()));
    for (const auto &[name, v] : vm.globals()) {
        w.str(name);
        w.value(v);
    }
    w.u32(static_cast<uint32_t>(vm.heap().size()));
    for (const auto &[_, obj] : vm.heap()) detail::encode_heap_object(w, obj);
    return w.take();
}

} // namespace mvm
