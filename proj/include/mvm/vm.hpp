#pragma once

// Deterministic interpreter for instrumented programs: cooperative virtual
// threads under a round-robin scheduler with a configurable quantum, mobile
// monitors with FIFO entry/wait sets, the entity-wide execution flag, and a
// virtual clock. There is no nondeterminism anywhere: two runs with the same
// program and quantum produce identical output traces and event logs.
//
// Parking convention: a parked thread's pc stays AT the blocking instruction.
// Unparking re-executes it (a checkpoint falls through once RUNNING, an enter
// re-attempts acquisition, a wait re-attempts with the saved recursion), with
// one exception: a sleeper's wake completes the SLEEP and advances past it.
//
// APC maintenance: executing invoke-class instruction #k with k >= 1 sets the
// frame's apc to k (mirrored into the reserved local) before the instruction
// does anything else; the entry checkpoint (#0) leaves the APCINIT value -1.
// DISPATCH(-1) and DISPATCH(0) both land on pc 2, and a frame parked at or
// inside invoke #k always carries apc = k, which is what state capture
// records and restoration dispatches on.

#include <json.hpp>

#include <deque>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mvm/isa.hpp"
#include "mvm/verifier.hpp"

namespace mvm {

namespace trapc {
inline constexpr std::string_view DivisionByZero = "DivisionByZero";
inline constexpr std::string_view NullDereference = "NullDereference";
inline constexpr std::string_view DanglingRef = "DanglingRef";
inline constexpr std::string_view UnknownField = "UnknownField";
inline constexpr std::string_view UnknownClass = "UnknownClass";
inline constexpr std::string_view UnknownMethod = "UnknownMethod";
inline constexpr std::string_view UnknownGlobal = "UnknownGlobal";
inline constexpr std::string_view TypeError = "TypeError";
inline constexpr std::string_view IllegalMonitorState = "IllegalMonitorState";
inline constexpr std::string_view NegativeSleep = "NegativeSleep";
inline constexpr std::string_view ApcOutOfRange = "ApcOutOfRange";
inline constexpr std::string_view StackCorruption = "StackCorruption";
} // namespace trapc

struct Frame {
    std::string method;
    std::vector<Value> locals;
    std::vector<Value> stack;
    uint32_t pc = 0;
    int32_t apc = -1;
};

enum class ParkKind : uint8_t {
    runnable = 0,
    exec_blocked = 1,
    monitor_entry = 2,
    monitor_wait = 3,
    sleeping = 4,
    done = 5,
};

inline std::string_view park_kind_name(ParkKind k) {
    switch (k) {
    case ParkKind::runnable: return "runnable";
    case ParkKind::exec_blocked: return "exec_blocked";
    case ParkKind::monitor_entry: return "monitor_entry";
    case ParkKind::monitor_wait: return "monitor_wait";
    case ParkKind::sleeping: return "sleeping";
    case ParkKind::done: return "done";
    }
    return "?";
}

struct ThreadCtx {
    uint32_t tid = 0;
    std::vector<Frame> frames; // bottom -> top
    ParkKind park = ParkKind::runnable;
    uint32_t park_ref = 0;      // monitor_entry / monitor_wait
    int64_t sleep_deadline = 0; // sleeping
    /// Recursion released by a wait, restored on re-acquisition; nonzero only
    /// while a wait is in flight (parked waiting, notified, or re-acquiring).
    uint32_t saved_recursion = 0;
    bool resuming_wait = false;

    bool live() const { return park != ParkKind::done; }
    bool parked() const { return park != ParkKind::runnable && park != ParkKind::done; }
};

struct MobileMonitor {
    uint32_t object_ref = 0;
    std::optional<uint32_t> owner;
    uint32_t recursion = 0;
    std::deque<uint32_t> entry_set; // FIFO tids
    std::deque<uint32_t> wait_set;  // FIFO tids
};

struct HeapObject {
    uint32_t id = 0;
    std::string class_name;
    std::map<std::string, Value> fields;
};

enum class ExecStatus : uint8_t { running = 0, suspended = 1 };

struct ExecutionControl {
    ExecStatus status = ExecStatus::running;
};

struct TrapInfo {
    std::string code;
    std::string message;
    uint32_t tid = 0;
    uint32_t pc = 0;
};

enum class StepOutcome { progressed, all_parked, all_done, trapped };

struct ExecCounters {
    uint64_t total = 0;              // completed instructions
    uint64_t frames_started = 0;     // root + INVOKE + SPAWN frames
    uint64_t invoke_class_source = 0; // completions of INVOKE/SPAWN/SLEEP/MENTER-family
    uint64_t checkpoints = 0;        // completed CHECKPOINTs
    uint64_t position_hits = 0;      // completions at counted (method, pc) positions
};

struct FrameView {
    std::string method;
    uint32_t pc = 0;
    int32_t apc = -1;
    std::vector<Value> locals;
};

struct ThreadView {
    uint32_t tid = 0;
    ParkKind park = ParkKind::runnable;
    uint32_t park_ref = 0;
    int64_t sleep_deadline = 0;
    uint32_t saved_recursion = 0;
    std::vector<FrameView> frames;
};

struct StateView {
    ExecStatus status = ExecStatus::running;
    int64_t clock = 0;
    std::vector<ThreadView> threads;
};

struct VmOptions {
    uint32_t quantum = 10; // 0 = run each thread until it parks or finishes
    bool allow_uninstrumented = false;
    bool record_branches = false;
    /// When set, every completed instruction asserts that its observed stack
    /// depth matches the verifier's static map (the soundness oracle).
    bool check_static_depths = false;
};

class Vm {
  public:
    static Result<Vm> load(Program program, VmOptions opts = {}) {
        if (!opts.allow_uninstrumented && !program.instrumented())
            return make_error(errc::NotInstrumented, "program must be instrumented before loading");
        VerificationReport report = verify(program);
        if (!report.accepted())
            return make_error(errc::VerificationFailed, report.summary());
        Vm vm;
        vm.opts_ = opts;
        if (opts.check_static_depths) vm.static_depths_ = report;
        vm.program_ = std::move(program);
        for (const auto &g : vm.program_.globals) vm.globals_[g] = Value::null();
        vm.spawn_thread(vm.program_.entry_method, {});
        return vm;
    }

    // --- scheduling -------------------------------------------------------

    StepOutcome step() {
        if (trap_) return StepOutcome::trapped;
        wake_due_sleepers();
        uint32_t tid = 0;
        if (!pick_runnable(tid)) {
            if (!any_live()) return StepOutcome::all_done;
            if (control_.status == ExecStatus::running && advance_clock_to_next_deadline()) {
                wake_due_sleepers();
                if (!pick_runnable(tid)) return StepOutcome::all_parked;
            } else {
                return StepOutcome::all_parked;
            }
        }
        cursor_ = tid + 1;
        ThreadCtx &t = threads_.at(tid);
        uint64_t budget = opts_.quantum == 0 ? UINT64_MAX : opts_.quantum;
        for (uint64_t i = 0; i < budget; ++i) {
            ExecSignal sig = exec_one(t);
            if (sig != ExecSignal::ok) break;
        }
        return trap_ ? StepOutcome::trapped : StepOutcome::progressed;
    }

    StepOutcome run() {
        while (true) {
            StepOutcome o = step();
            if (o != StepOutcome::progressed) return o;
        }
    }

    // --- execution control --------------------------------------------------

    Result<void> suspend() {
        if (control_.status != ExecStatus::running)
            return make_error(errc::InvalidTransition, "suspend requires RUNNING");
        control_.status = ExecStatus::suspended;
        log_event({{"ev", "suspend"}});
        return {};
    }

    Result<void> resume() {
        if (control_.status != ExecStatus::suspended)
            return make_error(errc::InvalidTransition, "resume requires SUSPENDED");
        control_.status = ExecStatus::running;
        log_event({{"ev", "resume"}});
        for (auto &[tid, t] : threads_) {
            if (t.park == ParkKind::exec_blocked) {
                t.park = ParkKind::runnable;
                log_event({{"ev", "unpark"}, {"tid", tid}, {"why", "resume"}});
            }
        }
        return {};
    }

    /// Arms an execution-flag flip at the k-th subsequent checkpoint arrival,
    /// so that checkpoint is the first to observe SUSPENDED and parks there.
    void arm_suspend_at_checkpoint(uint64_t k) { arm_remaining_ = k; }

    bool all_parked() const {
        for (const auto &[_, t] : threads_)
            if (t.park == ParkKind::runnable) return false;
        return true;
    }
    bool any_live() const {
        for (const auto &[_, t] : threads_)
            if (t.live()) return true;
        return false;
    }

    // --- introspection ------------------------------------------------------

    StateView inspect() const {
        StateView sv;
        sv.status = control_.status;
        sv.clock = clock_;
        for (const auto &[tid, t] : threads_) {
            if (!t.live()) continue;
            ThreadView tv;
            tv.tid = tid;
            tv.park = t.park;
            tv.park_ref = t.park_ref;
            tv.sleep_deadline = t.sleep_deadline;
            tv.saved_recursion = t.saved_recursion;
            for (const auto &f : t.frames) tv.frames.push_back(FrameView{f.method, f.pc, f.apc, f.locals});
            sv.threads.push_back(std::move(tv));
        }
        return sv;
    }

    const Program &program() const { return program_; }
    ExecStatus status() const { return control_.status; }
    int64_t clock() const { return clock_; }
    const std::vector<Value> &output_trace() const { return output_; }
    const std::vector<nlohmann::ordered_json> &event_log() const { return events_; }
    const std::optional<TrapInfo> &trap() const { return trap_; }
    const ExecCounters &counters() const { return counters_; }
    const std::map<uint32_t, ThreadCtx> &threads() const { return threads_; }
    const std::map<uint32_t, MobileMonitor> &monitors() const { return monitors_; }
    const std::map<uint32_t, HeapObject> &heap() const { return heap_; }
    const std::map<std::string, Value> &globals() const { return globals_; }
    uint32_t next_tid() const { return next_tid_; }
    const std::vector<uint8_t> &branch_trace() const { return branches_; }

    std::string event_log_ldjson() const {
        std::string out;
        for (const auto &e : events_) out += e.dump() + "\n";
        return out;
    }

    /// Marks (method, pc) positions whose completions are tallied in
    /// counters().position_hits — the bench module counts innermost-loop
    /// header arrivals this way.
    void count_positions(std::map<std::string, std::set<uint32_t>> positions) {
        counted_positions_ = std::move(positions);
    }

  private:
    friend struct ImageOps;

    enum class ExecSignal { ok, parked, finished, trapped };

    Vm() = default;

    const MethodDef &method(const std::string &name) const { return program_.methods.at(name); }

    void log_event(nlohmann::ordered_json e) { events_.push_back(std::move(e)); }

    uint32_t spawn_thread(const std::string &method_name, std::vector<Value> args) {
        const MethodDef &m = method(method_name);
        ThreadCtx t;
        t.tid = next_tid_++;
        Frame f;
        f.method = method_name;
        f.locals.assign(m.local_count, Value::null());
        for (size_t i = 0; i < args.size() && i < m.local_count; ++i) f.locals[i] = std::move(args[i]);
        t.frames.push_back(std::move(f));
        counters_.frames_started++;
        log_event({{"ev", "spawn"}, {"tid", t.tid}, {"method", method_name}});
        uint32_t tid = t.tid;
        threads_.emplace(tid, std::move(t));
        return tid;
    }

    bool pick_runnable(uint32_t &out) {
        if (threads_.empty()) return false;
        auto it = threads_.lower_bound(cursor_);
        for (auto i = it; i != threads_.end(); ++i)
            if (i->second.park == ParkKind::runnable) {
                out = i->first;
                return true;
            }
        for (auto i = threads_.begin(); i != it; ++i)
            if (i->second.park == ParkKind::runnable) {
                out = i->first;
                return true;
            }
        return false;
    }

    void wake_due_sleepers() {
        for (auto &[tid, t] : threads_) {
            if (t.park != ParkKind::sleeping || t.sleep_deadline > clock_) continue;
            t.park = ParkKind::runnable;
            log_event({{"ev", "unpark"}, {"tid", tid}, {"why", "wake"}});
            // waking completes the SLEEP
            Frame &f = t.frames.back();
            finish_instruction(t, f, method(f.method).code[f.pc]);
            f.pc++;
        }
    }

    bool advance_clock_to_next_deadline() {
        std::optional<int64_t> next;
        for (const auto &[_, t] : threads_)
            if (t.park == ParkKind::sleeping && (!next || t.sleep_deadline < *next)) next = t.sleep_deadline;
        if (!next || *next <= clock_) return false;
        clock_ = *next;
        log_event({{"ev", "clock"}, {"ms", clock_}});
        return true;
    }

    // Bookkeeping for a completed instruction.
    void finish_instruction(ThreadCtx &t, Frame &f, const Instruction &ins) {
        counters_.total++;
        if (ins.op == Opcode::CHECKPOINT) counters_.checkpoints++;
        if (is_invoke_class_source(ins.op)) counters_.invoke_class_source++;
        if (!counted_positions_.empty()) {
            auto it = counted_positions_.find(f.method);
            if (it != counted_positions_.end() && it->second.count(f.pc)) counters_.position_hits++;
        }
        (void)t;
    }

    void set_trap(ThreadCtx &t, std::string_view code, std::string message) {
        trap_ = TrapInfo{std::string(code), std::move(message), t.tid, t.frames.empty() ? 0 : t.frames.back().pc};
        log_event({{"ev", "trap"}, {"tid", t.tid}, {"pc", trap_->pc}, {"code", trap_->code}});
    }

    void park(ThreadCtx &t, ParkKind kind, uint32_t ref = 0, int64_t deadline = 0) {
        t.park = kind;
        t.park_ref = ref;
        t.sleep_deadline = deadline;
        const Frame &f = t.frames.back();
        for (const auto &fr : t.frames)
            if (!fr.stack.empty()) {
                set_trap(t, trapc::StackCorruption, "operand stack not empty at park");
                return;
            }
        nlohmann::ordered_json e{{"ev", "park"},
                                 {"tid", t.tid},
                                 {"kind", std::string(park_kind_name(kind))},
                                 {"method", f.method},
                                 {"pc", f.pc}};
        if (kind == ParkKind::monitor_entry || kind == ParkKind::monitor_wait) e["ref"] = ref;
        if (kind == ParkKind::sleeping) e["deadline"] = deadline;
        log_event(std::move(e));
    }

    MobileMonitor &monitor_for(uint32_t ref) {
        auto it = monitors_.find(ref);
        if (it == monitors_.end()) {
            MobileMonitor m;
            m.object_ref = ref;
            it = monitors_.emplace(ref, std::move(m)).first;
        }
        return it->second;
    }

    void unpark_entry_head(MobileMonitor &mon) {
        if (mon.entry_set.empty()) return;
        uint32_t head = mon.entry_set.front();
        mon.entry_set.pop_front();
        threads_.at(head).park = ParkKind::runnable;
        log_event({{"ev", "unpark"}, {"tid", head}, {"why", "handoff"}});
    }

    /// apc := k for invoke-class instruction #k (k >= 1); the entry
    /// checkpoint keeps the APCINIT sentinel.
    void note_invoke_arrival(const MethodDef &m, Frame &f) {
        if (!m.instrumented) return;
        auto it = std::lower_bound(m.invoke_table.begin(), m.invoke_table.end(), f.pc);
        if (it == m.invoke_table.end() || *it != f.pc) return;
        auto idx = static_cast<int32_t>(it - m.invoke_table.begin());
        if (idx == 0) return;
        f.apc = idx;
        f.locals[m.local_count - 1] = Value::integer(idx);
    }

    Result<uint32_t> object_ref_at(ThreadCtx &t, const Value &v) {
        if (v.is_null()) return make_error(trapc::NullDereference, "null object reference");
        if (!v.is_ref()) return make_error(trapc::TypeError, "expected a reference, got " + v.display());
        if (!heap_.count(v.as_ref().id))
            return make_error(trapc::DanglingRef, "ref#" + std::to_string(v.as_ref().id) + " does not resolve");
        (void)t;
        return v.as_ref().id;
    }

    ExecSignal exec_one(ThreadCtx &t) {
        Frame &f = t.frames.back();
        const MethodDef &m = method(f.method);
        const Instruction &ins = m.code[f.pc];

        if (opts_.check_static_depths && static_depths_) {
            const auto &mv = static_depths_->methods.at(f.method);
            if (!mv.depth[f.pc] || *mv.depth[f.pc] != static_cast<int>(f.stack.size())) {
                set_trap(t, trapc::StackCorruption,
                         "dynamic depth " + std::to_string(f.stack.size()) + " differs from static map at pc " +
                             std::to_string(f.pc));
                return ExecSignal::trapped;
            }
        }
        if (is_invoke_class(ins.op)) note_invoke_arrival(m, f);

        auto pop = [&]() {
            Value v = std::move(f.stack.back());
            f.stack.pop_back();
            return v;
        };
        auto complete = [&]() {
            finish_instruction(t, f, ins);
            f.pc++;
            return ExecSignal::ok;
        };
        auto trap = [&](std::string_view code, std::string msg) {
            set_trap(t, code, std::move(msg));
            return ExecSignal::trapped;
        };

        switch (ins.op) {
        case Opcode::CONST:
            f.stack.push_back(ins.imm);
            return complete();
        case Opcode::LOAD:
            f.stack.push_back(f.locals[ins.a]);
            return complete();
        case Opcode::STORE:
            f.locals[ins.a] = pop();
            return complete();
        case Opcode::ADD:
        case Opcode::SUB:
        case Opcode::MUL:
        case Opcode::DIV:
        case Opcode::MOD:
        case Opcode::LT:
        case Opcode::LE: {
            Value b = pop(), a = pop();
            if (!a.is_int() || !b.is_int())
                return trap(trapc::TypeError, std::string(opcode_name(ins.op)) + " needs Int operands");
            int64_t x = a.as_int(), y = b.as_int();
            switch (ins.op) {
            case Opcode::ADD: f.stack.push_back(Value::integer(static_cast<int64_t>(static_cast<uint64_t>(x) + static_cast<uint64_t>(y)))); break;
            case Opcode::SUB: f.stack.push_back(Value::integer(static_cast<int64_t>(static_cast<uint64_t>(x) - static_cast<uint64_t>(y)))); break;
            case Opcode::MUL: f.stack.push_back(Value::integer(static_cast<int64_t>(static_cast<uint64_t>(x) * static_cast<uint64_t>(y)))); break;
            case Opcode::DIV:
                if (y == 0) return trap(trapc::DivisionByZero, "division by zero");
                f.stack.push_back(Value::integer(x == INT64_MIN && y == -1 ? INT64_MIN : x / y));
                break;
            case Opcode::MOD:
                if (y == 0) return trap(trapc::DivisionByZero, "modulo by zero");
                f.stack.push_back(Value::integer(x == INT64_MIN && y == -1 ? 0 : x % y));
                break;
            case Opcode::LT: f.stack.push_back(Value::boolean(x < y)); break;
            case Opcode::LE: f.stack.push_back(Value::boolean(x <= y)); break;
            default: break;
            }
            return complete();
        }
        case Opcode::EQ: {
            Value b = pop(), a = pop();
            f.stack.push_back(Value::boolean(a == b));
            return complete();
        }
        case Opcode::NOT: {
            Value a = pop();
            if (!a.is_bool()) return trap(trapc::TypeError, "NOT needs a Bool operand");
            f.stack.push_back(Value::boolean(!a.as_bool()));
            return complete();
        }
        case Opcode::AND:
        case Opcode::OR: {
            Value b = pop(), a = pop();
            if (!a.is_bool() || !b.is_bool())
                return trap(trapc::TypeError, std::string(opcode_name(ins.op)) + " needs Bool operands");
            bool r = ins.op == Opcode::AND ? (a.as_bool() && b.as_bool()) : (a.as_bool() || b.as_bool());
            f.stack.push_back(Value::boolean(r));
            return complete();
        }
        case Opcode::JMP:
            finish_instruction(t, f, ins);
            f.pc = ins.a;
            return ExecSignal::ok;
        case Opcode::JMPIF: {
            Value c = pop();
            if (!c.is_bool()) return trap(trapc::TypeError, "JMPIF needs a Bool condition");
            finish_instruction(t, f, ins);
            if (opts_.record_branches) branches_.push_back(c.as_bool() ? 1 : 0);
            f.pc = c.as_bool() ? ins.a : f.pc + 1;
            return ExecSignal::ok;
        }
        case Opcode::INVOKE: {
            auto callee = program_.methods.find(ins.sym);
            if (callee == program_.methods.end())
                return trap(trapc::UnknownMethod, "call to undefined method '" + ins.sym + "'");
            finish_instruction(t, f, ins);
            Frame nf;
            nf.method = ins.sym;
            nf.locals.assign(callee->second.local_count, Value::null());
            for (size_t i = 0; i < ins.args.size(); ++i) nf.locals[i] = f.locals[ins.args[i]];
            counters_.frames_started++;
            t.frames.push_back(std::move(nf)); // caller pc advances at RETURN
            return ExecSignal::ok;
        }
        case Opcode::RETURN: {
            Value ret = ins.ret ? f.locals[*ins.ret] : Value::null();
            finish_instruction(t, f, ins);
            t.frames.pop_back();
            if (t.frames.empty()) {
                t.park = ParkKind::done;
                log_event({{"ev", "done"}, {"tid", t.tid}});
                return ExecSignal::finished;
            }
            Frame &caller = t.frames.back();
            const Instruction &site = method(caller.method).code[caller.pc];
            if (site.ret) caller.locals[*site.ret] = std::move(ret);
            caller.pc++;
            return ExecSignal::ok;
        }
        case Opcode::NEWOBJ: {
            auto cls = program_.classes.find(ins.sym);
            if (cls == program_.classes.end())
                return trap(trapc::UnknownClass, "unknown class '" + ins.sym + "'");
            HeapObject obj;
            obj.id = next_ref_++;
            obj.class_name = ins.sym;
            for (const auto &field : cls->second) obj.fields[field] = Value::null();
            f.locals[ins.b] = Value::ref(obj.id);
            heap_.emplace(obj.id, std::move(obj));
            return complete();
        }
        case Opcode::GETFIELD:
        case Opcode::PUTFIELD: {
            auto ref = object_ref_at(t, f.locals[ins.a]);
            if (!ref) return trap(ref.error().code, ref.error().message);
            HeapObject &obj = heap_.at(ref.value());
            auto field = obj.fields.find(ins.sym);
            if (field == obj.fields.end())
                return trap(trapc::UnknownField, "class '" + obj.class_name + "' has no field '" + ins.sym + "'");
            if (ins.op == Opcode::GETFIELD)
                f.locals[ins.b] = field->second;
            else
                field->second = f.locals[ins.b];
            return complete();
        }
        case Opcode::GETGLOBAL:
        case Opcode::PUTGLOBAL: {
            auto g = globals_.find(ins.sym);
            if (g == globals_.end()) return trap(trapc::UnknownGlobal, "undeclared global '" + ins.sym + "'");
            if (ins.op == Opcode::GETGLOBAL)
                f.locals[ins.b] = g->second;
            else
                g->second = f.locals[ins.b];
            return complete();
        }
        case Opcode::SLEEP: {
            const Value &v = f.locals[ins.a];
            if (!v.is_int()) return trap(trapc::TypeError, "SLEEP needs an Int duration");
            if (v.as_int() < 0) return trap(trapc::NegativeSleep, "negative sleep " + std::to_string(v.as_int()));
            park(t, ParkKind::sleeping, 0, clock_ + v.as_int());
            return trap_ ? ExecSignal::trapped : ExecSignal::parked;
        }
        case Opcode::SPAWN: {
            auto callee = program_.methods.find(ins.sym);
            if (callee == program_.methods.end())
                return trap(trapc::UnknownMethod, "spawn of undefined method '" + ins.sym + "'");
            std::vector<Value> args;
            for (uint32_t a : ins.args) args.push_back(f.locals[a]);
            uint32_t tid = spawn_thread(ins.sym, std::move(args));
            if (ins.ret) f.locals[*ins.ret] = Value::integer(tid);
            return complete();
        }
        case Opcode::PRINT:
            output_.push_back(f.locals[ins.a]);
            log_event({{"ev", "print"}, {"tid", t.tid}, {"value", f.locals[ins.a].display()}});
            return complete();
        case Opcode::CHECKPOINT: {
            if (arm_remaining_ && control_.status == ExecStatus::running) {
                if (--*arm_remaining_ == 0) {
                    arm_remaining_.reset();
                    control_.status = ExecStatus::suspended;
                    log_event({{"ev", "suspend"}});
                }
            }
            if (control_.status == ExecStatus::suspended) {
                park(t, ParkKind::exec_blocked);
                return trap_ ? ExecSignal::trapped : ExecSignal::parked;
            }
            return complete();
        }
        case Opcode::APCINIT:
            f.apc = -1;
            f.locals[m.local_count - 1] = Value::integer(-1);
            return complete();
        case Opcode::APCSET:
            f.apc = static_cast<int32_t>(ins.a);
            f.locals[m.local_count - 1] = Value::integer(ins.a);
            return complete();
        case Opcode::DISPATCH: {
            finish_instruction(t, f, ins);
            if (f.apc < 0) {
                f.pc++;
            } else {
                if (static_cast<size_t>(f.apc) >= ins.args.size())
                    return trap(trapc::ApcOutOfRange, "apc " + std::to_string(f.apc) + " exceeds dispatch table");
                f.pc = ins.args[f.apc];
            }
            return ExecSignal::ok;
        }
        case Opcode::MENTER:
        case Opcode::MINVOKE_ENTER: {
            auto ref = object_ref_at(t, f.locals[ins.a]);
            if (!ref) return trap(ref.error().code, ref.error().message);
            MobileMonitor &mon = monitor_for(ref.value());
            if (!mon.owner) {
                mon.owner = t.tid;
                mon.recursion = 1;
                log_event({{"ev", "monitor"}, {"action", "acquire"}, {"tid", t.tid}, {"ref", ref.value()}, {"recursion", 1}});
                return complete();
            }
            if (*mon.owner == t.tid) {
                mon.recursion++;
                log_event({{"ev", "monitor"}, {"action", "reenter"}, {"tid", t.tid}, {"ref", ref.value()}, {"recursion", mon.recursion}});
                return complete();
            }
            mon.entry_set.push_back(t.tid);
            park(t, ParkKind::monitor_entry, ref.value());
            return trap_ ? ExecSignal::trapped : ExecSignal::parked;
        }
        case Opcode::MEXIT:
        case Opcode::MINVOKE_EXIT: {
            auto ref = object_ref_at(t, f.locals[ins.a]);
            if (!ref) return trap(ref.error().code, ref.error().message);
            MobileMonitor &mon = monitor_for(ref.value());
            if (!mon.owner || *mon.owner != t.tid)
                return trap(trapc::IllegalMonitorState, "exit without ownership of ref#" + std::to_string(ref.value()));
            mon.recursion--;
            log_event({{"ev", "monitor"}, {"action", "exit"}, {"tid", t.tid}, {"ref", ref.value()}, {"recursion", mon.recursion}});
            if (mon.recursion == 0) {
                mon.owner.reset();
                unpark_entry_head(mon);
            }
            return complete();
        }
        case Opcode::MWAIT:
        case Opcode::MINVOKE_WAIT: {
            auto ref = object_ref_at(t, f.locals[ins.a]);
            if (!ref) return trap(ref.error().code, ref.error().message);
            MobileMonitor &mon = monitor_for(ref.value());
            if (t.resuming_wait) {
                // notified (or restored) waiter re-attempting acquisition
                if (!mon.owner) {
                    mon.owner = t.tid;
                    mon.recursion = t.saved_recursion;
                    t.saved_recursion = 0;
                    t.resuming_wait = false;
                    log_event({{"ev", "monitor"}, {"action", "acquire"}, {"tid", t.tid}, {"ref", ref.value()}, {"recursion", mon.recursion}});
                    return complete();
                }
                mon.entry_set.push_back(t.tid);
                park(t, ParkKind::monitor_entry, ref.value());
                return trap_ ? ExecSignal::trapped : ExecSignal::parked;
            }
            if (!mon.owner || *mon.owner != t.tid)
                return trap(trapc::IllegalMonitorState, "wait without ownership of ref#" + std::to_string(ref.value()));
            t.saved_recursion = mon.recursion;
            t.resuming_wait = true;
            mon.recursion = 0;
            mon.owner.reset();
            log_event({{"ev", "monitor"}, {"action", "wait"}, {"tid", t.tid}, {"ref", ref.value()}, {"recursion", 0}});
            unpark_entry_head(mon);
            mon.wait_set.push_back(t.tid);
            park(t, ParkKind::monitor_wait, ref.value());
            return trap_ ? ExecSignal::trapped : ExecSignal::parked;
        }
        case Opcode::MNOTIFY:
        case Opcode::MINVOKE_NOTIFY:
        case Opcode::MNOTIFYALL:
        case Opcode::MINVOKE_NOTIFYALL: {
            auto ref = object_ref_at(t, f.locals[ins.a]);
            if (!ref) return trap(ref.error().code, ref.error().message);
            MobileMonitor &mon = monitor_for(ref.value());
            if (!mon.owner || *mon.owner != t.tid)
                return trap(trapc::IllegalMonitorState, "notify without ownership of ref#" + std::to_string(ref.value()));
            bool all = ins.op == Opcode::MNOTIFYALL || ins.op == Opcode::MINVOKE_NOTIFYALL;
            do {
                if (mon.wait_set.empty()) break;
                uint32_t moved = mon.wait_set.front();
                mon.wait_set.pop_front();
                mon.entry_set.push_back(moved);
                threads_.at(moved).park = ParkKind::monitor_entry;
                log_event({{"ev", "monitor"},
                           {"action", all ? "notifyall" : "notify"},
                           {"tid", t.tid},
                           {"ref", ref.value()},
                           {"moved", moved}});
            } while (all);
            return complete();
        }
        }
        set_trap(t, trapc::StackCorruption, "unhandled opcode");
        return ExecSignal::trapped;
    }

    VmOptions opts_;
    Program program_;
    std::map<uint32_t, ThreadCtx> threads_;
    std::map<uint32_t, MobileMonitor> monitors_;
    std::map<uint32_t, HeapObject> heap_;
    std::map<std::string, Value> globals_;
    ExecutionControl control_;
    int64_t clock_ = 0;
    uint32_t next_tid_ = 0;
    uint32_t next_ref_ = 1;
    uint32_t cursor_ = 0;
    std::vector<Value> output_;
    std::vector<nlohmann::ordered_json> events_;
    std::optional<TrapInfo> trap_;
    ExecCounters counters_;
    std::optional<uint64_t> arm_remaining_;
    std::map<std::string, std::set<uint32_t>> counted_positions_;
    std::vector<uint8_t> branches_;
    std::optional<VerificationReport> static_depths_;
};

} // namespace mvm
