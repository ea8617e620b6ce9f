import capstone
import pytest
import unicorn.arm_const as uc_arm
from capstone import arm_const as cs_arm
from unicorn import (UC_ARCH_ARM, UC_HOOK_CODE, UC_HOOK_MEM_READ, UC_HOOK_MEM_WRITE, UC_MODE_MCLASS,
                     UC_MODE_THUMB, Uc)

from programs import LOCKSTEP, RAM, image, make_rng, random_straight_line, random_structured
from wcec import sim
from wcec.asm import build_image
from wcec.cfg import reconstruct
from wcec.errors import CfgError, SimulationFault
from wcec.loader import RegionKind
from wcec.models import get_model, read_trace, replay

_CS = capstone.Cs(capstone.CS_ARCH_ARM, capstone.CS_MODE_THUMB | capstone.CS_MODE_MCLASS)
_CS.detail = True
_REGS = [getattr(uc_arm, f"UC_ARM_REG_R{i}") for i in range(13)] + [uc_arm.UC_ARM_REG_SP, uc_arm.UC_ARM_REG_LR]


def _condition(cc, flags):
    n, z, c, v = (flags >> 3) & 1, (flags >> 2) & 1, (flags >> 1) & 1, flags & 1
    return {
        0: True, cs_arm.ARM_CC_AL: True,
        cs_arm.ARM_CC_EQ: z, cs_arm.ARM_CC_NE: not z, cs_arm.ARM_CC_HS: c, cs_arm.ARM_CC_LO: not c,
        cs_arm.ARM_CC_MI: n, cs_arm.ARM_CC_PL: not n, cs_arm.ARM_CC_VS: v, cs_arm.ARM_CC_VC: not v,
        cs_arm.ARM_CC_HI: c and not z, cs_arm.ARM_CC_LS: not c or z, cs_arm.ARM_CC_GE: n == v,
        cs_arm.ARM_CC_LT: n != v, cs_arm.ARM_CC_GT: not z and n == v, cs_arm.ARM_CC_LE: z or n != v,
    }[cc]


class Reference:
    """Unicorn Cortex-M0 with hook-based counters, following the documented counting rules.

    The stop address is a spare halfword at the end of the flash page; the
    system address space where the simulator's sentinel lives is execute-never
    on M-profile cores.
    """

    def __init__(self, img):
        self.img = img
        mu = Uc(UC_ARCH_ARM, UC_MODE_THUMB | UC_MODE_MCLASS)
        mu.ctl_set_cpu_model(uc_arm.UC_CPU_ARM_CORTEX_M0)
        for r in img.regions:
            base, end = r.base & ~0xFFF, (r.end + 0xFFF + 4) & ~0xFFF
            mu.mem_map(base, end - base)
            data = img.contents.get(r.name)
            if data:
                mu.mem_write(r.base, bytes(data))
            if r.executable:
                self.stop = end - 2
        sp, _ = sim.default_stack(img)
        mu.reg_write(uc_arm.UC_ARM_REG_SP, sp)
        mu.reg_write(uc_arm.UC_ARM_REG_LR, self.stop | 1)
        mu.reg_write(uc_arm.UC_ARM_REG_XPSR, 1 << 24)     # flags are unknown at reset; start both at zero
        self.mu = mu
        self.pc = img.entry
        self.counts = dict.fromkeys(["INSTR_NOMUL", "RAM_READ", "RAM_WRITE", "FLASH_READ", "TAKEN_BRANCH", "MUL"], 0)
        self._prev = None
        mu.hook_add(UC_HOOK_CODE, self._code)
        mu.hook_add(UC_HOOK_MEM_READ, self._read)
        mu.hook_add(UC_HOOK_MEM_WRITE, self._write)

    def _retire(self, next_pc):
        ins = self._prev
        if ins is None:
            return
        _, written = ins.regs_access()
        writes_pc = cs_arm.ARM_REG_PC in written or ins.group(capstone.CS_GRP_JUMP) or ins.group(capstone.CS_GRP_CALL)
        if (writes_pc and self._passed) or next_pc != ins.address + ins.size:
            self.counts["TAKEN_BRANCH"] += 1
        self._prev = None

    def _code(self, uc, addr, size, _):
        self._retire(addr)
        if addr == self.stop:
            return
        ins = next(_CS.disasm(bytes(uc.mem_read(addr, size)), addr))
        self.counts["MUL" if ins.mnemonic == "muls" else "INSTR_NOMUL"] += 1
        self._prev = ins
        self._passed = _condition(ins.cc, uc.reg_read(uc_arm.UC_ARM_REG_XPSR) >> 28)

    def _read(self, uc, access, addr, size, value, _):
        self.counts["RAM_READ" if self.img.classify(addr) is RegionKind.RAM else "FLASH_READ"] += 1

    def _write(self, uc, access, addr, size, value, _):
        self.counts["RAM_WRITE"] += 1

    def run(self, count):
        self.mu.emu_start(self.pc | 1, self.stop, count=count)
        self.pc = self.mu.reg_read(uc_arm.UC_ARM_REG_PC)
        self._retire(self.pc)

    def regs(self):
        return [self.mu.reg_read(r) for r in _REGS]

    def flags(self):
        return self.mu.reg_read(uc_arm.UC_ARM_REG_XPSR) >> 28

    def ram(self):
        r = next(r for r in self.img.regions if r.writable)
        return bytes(self.mu.mem_read(r.base, r.size))


def _machine(img, lr):
    sp, limit = sim.default_stack(img)
    m = sim.Machine(img, sp, limit)
    m.r[14] = lr
    return m


def _lockstep(img, max_steps=3000):
    """Step both machines one instruction at a time; compare registers, flags and RAM."""
    ref = Reference(img)
    m = _machine(img, ref.stop | 1)
    pc = img.entry
    for _ in range(max_steps):
        if pc == ref.stop:
            break
        ins = m.decode(pc)
        pc, _ = m.step(ins)
        ref.run(1)
        assert ref.pc == pc, (ins.text, hex(ref.pc), hex(pc))
        assert ref.regs() == m.r[:15], ins.text
        assert ref.flags() == (m.n << 3 | m.z << 2 | m.c << 1 | m.v), ins.text
    ram = next(r for r in img.regions if r.writable)
    assert ref.ram() == bytes(m.mem.ram[ram.name][1])
    return ref


def _counters_match(img, max_steps=3000):
    ref = Reference(img)
    ref.run(max_steps)
    got = sim.run(img, stop=(ref.stop,), regs={14: ref.stop | 1}, max_steps=max_steps)
    assert got.fault is None
    assert dict(got.counters) == ref.counts
    assert got.regs[:15] == ref.regs()


@pytest.mark.parametrize("name,src,ann", LOCKSTEP, ids=[n for n, *_ in LOCKSTEP])
def test_fixtures_match_unicorn(name, src, ann):
    img = image(src)
    _lockstep(img)
    _counters_match(img)


@pytest.mark.parametrize("seed", range(40))
def test_random_alu_programs_match_unicorn(seed):
    img = image(random_straight_line(make_rng(seed), n=40))
    _lockstep(img)
    _counters_match(img)


def _memory_program(rng, n=30):
    lines = ["main:", "push {r4-r7, lr}", "sub sp, #24", f"ldr r7, ={RAM + 0x100:#x}", f"ldr r6, ={RAM + 0x300:#x}"]
    for r in range(6):
        lines.append(f"ldr r{r}, ={rng.randrange(1 << 32):#x}")
    ops = [
        lambda: f"str r{rng.randrange(6)}, [r7, #{4 * rng.randrange(32)}]",
        lambda: f"ldr r{rng.randrange(6)}, [r7, #{4 * rng.randrange(32)}]",
        lambda: f"strb r{rng.randrange(6)}, [r7, #{rng.randrange(32)}]",
        lambda: f"ldrb r{rng.randrange(6)}, [r7, #{rng.randrange(32)}]",
        lambda: f"strh r{rng.randrange(6)}, [r7, #{2 * rng.randrange(32)}]",
        lambda: f"ldrh r{rng.randrange(6)}, [r7, #{2 * rng.randrange(32)}]",
        lambda: f"movs r5, #{rng.randrange(64)}\nldrsb r{rng.randrange(5)}, [r7, r5]",
        lambda: f"movs r5, #{2 * rng.randrange(32)}\nldrsh r{rng.randrange(5)}, [r7, r5]",
        lambda: f"str r{rng.randrange(6)}, [sp, #{4 * rng.randrange(5)}]",
        lambda: f"ldr r{rng.randrange(6)}, [sp, #{4 * rng.randrange(5)}]",
        lambda: "mov r3, r6\nstm r3!, {r0, r1, r2}\nsubs r3, #12\nldm r3!, {r0, r2, r4}",
        lambda: "push {r0, r1, r2}\npop {r2, r3, r4}",
        lambda: "muls r{0}, r{1}, r{0}".format(rng.randrange(6), rng.randrange(6)),
        lambda: f"adds r{rng.randrange(6)}, r{rng.randrange(6)}, r{rng.randrange(6)}",
        lambda: f"cmp r{rng.randrange(6)}, r{rng.randrange(6)}",
    ]
    for _ in range(n):
        lines.append(rng.choice(ops)())
    lines += ["add sp, #24", "pop {r4-r7, pc}"]
    return "\n".join(lines)


@pytest.mark.parametrize("seed", range(40))
def test_random_memory_programs_match_unicorn(seed):
    img = image(_memory_program(make_rng(seed)))
    _lockstep(img)
    _counters_match(img)


@pytest.mark.parametrize("seed", range(40))
def test_random_branchy_programs_match_unicorn(seed):
    src = random_structured(make_rng(seed)).replace("push {lr}", f"push {{lr}}\nldr r4, ={RAM + 0x80:#x}", 1)
    img = image(src)
    _lockstep(img, max_steps=1500)
    _counters_match(img, max_steps=1500)


def test_mul_example_skips_stop_instruction():
    img = image("main:\nmovs r0,#5\nmuls r0,r0,r0\nstop: bx lr")
    res = sim.run(img, stop=(img.symbol("stop"),))
    assert res.stop_reason == sim.HIT_STOP
    assert dict(res.counters) == {"INSTR_NOMUL": 1, "MUL": 1, "RAM_READ": 0, "RAM_WRITE": 0,
                                  "FLASH_READ": 0, "TAKEN_BRANCH": 0}
    assert res.regs[0] == 25


def test_straight_line_counts_only_instructions():
    n = 17
    img = image("main:\n" + "adds r0,#1\n" * n + "stop: bx lr")
    res = sim.run(img, stop=(img.symbol("stop"),))
    assert res.counters["INSTR_NOMUL"] == n and sum(res.counters.values()) == n


@pytest.mark.parametrize("src,cause", [
    ("main:\nldr r1, =0x08000000\nstr r0,[r1]\nbx lr", "flash write"),
    ("main:\nldr r1, =0x60000000\nldr r0,[r1]\nbx lr", "unmapped"),
    ("main:\nldr r1, =0x20000001\nldr r0,[r1]\nbx lr", "unaligned"),
    ("main:\n.word 0xde00de00\nbx lr", "undefined"),
    ("main:\nrec: push {r0-r7, lr}\nbl rec\nbx lr", "stack"),
])
def test_faults_carry_pc_and_cause(src, cause):
    img = image(src)
    res = sim.run(img)
    assert res.stop_reason == sim.FAULT and isinstance(res.fault, SimulationFault)
    assert cause in str(res.fault)
    assert f"{res.pc:#010x}" in str(res.fault)


def test_step_cap():
    img = image("main:\nb main")
    res = sim.run(img, max_steps=50)
    assert res.stop_reason == sim.MAX_STEPS and res.steps == 50 and res.counters["TAKEN_BRANCH"] == 50


def test_initial_sp_must_be_ram():
    with pytest.raises(SimulationFault):
        sim.run(image("main:\nbx lr"), sp=0x0800_0000)


def test_trace_consistent_with_counters_and_deterministic():
    src = LOCKSTEP[[n for n, *_ in LOCKSTEP].index("call-in-loop")][1]
    img = image(src)
    a, b = sim.run(img, record_pcs=True), sim.run(img, record_pcs=True)
    assert a == b and a.trace_csv() == b.trace_csv()
    assert sum(n for _, n in a.trace) == a.steps == len(a.pcs)
    assert a.counters["INSTR_NOMUL"] + a.counters["MUL"] == a.steps
    assert a.trace_csv().splitlines()[0] == "step,pc"


def test_model_result_is_replay_of_counter_dump():
    m = get_model("cortex-m0.v1")
    img = image(LOCKSTEP[0][1])
    res = sim.run(img)
    assert sim.model_result(res, m) == replay(m, read_trace(sim.dump_counters(res))).total
    zero = sim.run(image("main:\nstop: bx lr"), stop=(image("main:\nstop: bx lr").symbol("stop"),))
    assert sim.model_result(zero, m) == 0


def test_flow_facts_examples():
    src = LOCKSTEP[[n for n, *_ in LOCKSTEP].index("nested-4x5")][1]
    img = image(src)
    cfg = reconstruct(img)
    facts = sim.derive_flow_facts(sim.run(img), cfg)
    assert facts.source == "trace"
    assert facts.loop_bounds == {img.symbol("outer"): (0, 4), img.symbol("inner"): (0, 5)}
    # three entries of ten iterations each
    src = ("main:\npush {r4, lr}\nmovs r4,#3\nagain: movs r0,#0\nloop: adds r0,#1\ncmp r0,#10\nblt loop\n"
           "subs r4,#1\nbne again\npop {r4, pc}")
    img = image(src)
    facts = sim.derive_flow_facts(sim.run(img), reconstruct(img))
    assert facts.loop_bounds[img.symbol("loop")] == (0, 10)
    # never entered
    src = "main:\nmovs r0,#0\ncmp r0,#0\nbeq out\nloop: subs r0,#1\nbne loop\nout: bx lr"
    img = image(src)
    facts = sim.derive_flow_facts(sim.run(img), reconstruct(img))
    assert facts.loop_bounds[img.symbol("loop")] == (0, 0)


def test_flow_facts_reject_foreign_addresses():
    img = image("main:\nmovs r0,#1\nbx lr")
    cfg = reconstruct(img)
    fake = sim.SimResult(sim.run(img).counters, [(img.entry + 0x40, 2)], 2, sim.HIT_STOP, 0, [0] * 16)
    with pytest.raises(CfgError, match="does not start"):
        sim.derive_flow_facts(fake, cfg)


def test_encoder_builds_images_with_symbols_and_data():
    img, prog = build_image("main:\nldr r0, =0x20000000\nldr r1,[r0]\nbx lr", data=b"\x2a\0\0\0")
    res = sim.run(img)
    assert res.regs[1] == 42 and res.counters["RAM_READ"] == 1 and img.symbol("main") == img.entry
