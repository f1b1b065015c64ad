"""
SMILES 子集语法：分词、递归下降解析、化合价检查与简单描述符

支持的语法：
- 有机子集原子 B C N O P S F Cl Br I 以及芳香小写 b c n o s p
- 键 - = # :，相邻芳香原子之间省略的键视为芳香键，其余省略视为单键
- 括号分支、数字与 %nn 闭环
- 方括号原子：可选同位素、H 计数、电荷、原子类

不支持（报告为 unsupported，计入无效但单独统计）：
立体化学 / \\ @、通配原子 *、多片段 .
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Iterable, List, Optional, Tuple

from .api import logger

# =============================================
# 异常
# =============================================


class SmilesError(Exception):
    """SMILES 错误基类；kind 为报告中使用的稳定字符串"""

    kind = "invalid"

    def __init__(self, position: int, detail: str = ""):
        self.position = position
        self.detail = detail
        super().__init__(f"{self.kind} at position {position}" + (f": {detail}" if detail else ""))


class LexError(SmilesError):
    kind = "lex_error"


class UnclosedRing(SmilesError):
    kind = "unclosed_ring"


class UnbalancedBranch(SmilesError):
    kind = "unbalanced_branch"


class ValenceExceeded(SmilesError):
    kind = "valence_exceeded"


class UnexpectedToken(SmilesError):
    kind = "unexpected_token"


class UnsupportedFeature(SmilesError):
    kind = "unsupported"


class MissingElement(SmilesError):
    kind = "missing_element"


# =============================================
# 词法
# =============================================

ATOM = "atom"
BRACKET_ATOM = "bracket_atom"
BOND = "bond"
BRANCH_OPEN = "branch_open"
BRANCH_CLOSE = "branch_close"
RING_CLOSURE = "ring_closure"
UNSUPPORTED = "unsupported"

# 两字母元素 Cl/Br 必须排在 C/B 之前
_TOKEN_RE = re.compile(
    r"(?P<bracket>\[[^\[\]]*\])"
    r"|(?P<atom>Cl|Br|[BCNOPSFI]|[bcnops])"
    r"|(?P<bond>[-=#:])"
    r"|(?P<open>\()"
    r"|(?P<close>\))"
    r"|(?P<ring>%\d{2}|\d)"
    r"|(?P<unsupported>[/\\.*@])"
)

_GROUP_KIND = {
    "bracket": BRACKET_ATOM,
    "atom": ATOM,
    "bond": BOND,
    "open": BRANCH_OPEN,
    "close": BRANCH_CLOSE,
    "ring": RING_CLOSURE,
    "unsupported": UNSUPPORTED,
}


@dataclass(frozen=True)
class Token:
    kind: str
    lexeme: str
    position: int


def tokenize(s: str) -> List[Token]:
    """贪心最长匹配分词

    Raises:
        LexError: 未知字符（附位置）或空输入
    """
    if not s:
        raise LexError(0, "empty input")
    tokens: List[Token] = []
    pos = 0
    while pos < len(s):
        m = _TOKEN_RE.match(s, pos)
        if m is None:
            raise LexError(pos, f"unknown character {s[pos]!r}")
        tokens.append(Token(_GROUP_KIND[m.lastgroup], m.group(0), pos))
        pos = m.end()
    return tokens


# =============================================
# 分子结构
# =============================================

ORGANIC_SUBSET = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I")
AROMATIC_SUBSET = ("b", "c", "n", "o", "s", "p")

# 标准化合价模型，多个取值时取能容纳已用键级的最小值
DEFAULT_VALENCES: Dict[str, Tuple[int, ...]] = {
    "B": (3,),
    "C": (4,),
    "N": (3,),
    "O": (2,),
    "P": (3, 5),
    "S": (2, 4, 6),
    "F": (1,),
    "Cl": (1,),
    "Br": (1,),
    "I": (1,),
    "H": (1,),
    "Se": (2, 4, 6),
    "As": (3, 5),
    "Si": (4,),
}

# 芳香体系中贡献孤对电子的原子不额外计 1
_LONE_PAIR_DONORS = ("O", "S", "Se")

_BRACKET_RE = re.compile(
    r"^(?P<isotope>\d+)?"
    r"(?P<symbol>se|as|[bcnops]|[A-Z][a-z]?)"
    r"(?P<chiral>@+)?"
    r"(?P<hcount>H\d*)?"
    r"(?P<charge>\+\d+|-\d+|\++|-+)?"
    r"(?::\d+)?$"
)


@dataclass
class Atom:
    element: str
    aromatic: bool = False
    charge: int = 0
    explicit_h: int = 0
    bracket: bool = False
    isotope: Optional[int] = None
    position: int = 0

    @property
    def symbol(self) -> str:
        """书写形式（芳香原子为小写）"""
        return self.element.lower() if self.aromatic else self.element


@dataclass
class Bond:
    a: int
    b: int
    order: int = 1
    aromatic: bool = False
    position: int = 0

    @property
    def valence_order(self) -> int:
        """计入化合价的键级：芳香键按 1 计"""
        return 1 if self.aromatic else self.order


@dataclass
class ParsedMol:
    atoms: List[Atom] = field(default_factory=list)
    bonds: List[Bond] = field(default_factory=list)
    ring_closures: List[Tuple[int, int]] = field(default_factory=list)
    source: str = ""

    def neighbors(self, index: int) -> List[Tuple[int, Bond]]:
        out = []
        for bond in self.bonds:
            if bond.a == index:
                out.append((bond.b, bond))
            elif bond.b == index:
                out.append((bond.a, bond))
        return out

    def has_bond(self, i: int, j: int) -> bool:
        return any({bond.a, bond.b} == {i, j} for bond in self.bonds)

    def element_counts(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for atom in self.atoms:
            counts[atom.element] = counts.get(atom.element, 0) + 1
        return counts

    def bond_multiset(self) -> List[Tuple[int, bool]]:
        return sorted((bond.order, bond.aromatic) for bond in self.bonds)


# =============================================
# 解析
# =============================================

_BOND_ORDERS = {"-": 1, "=": 2, "#": 3, ":": 1}


def _parse_charge(text: Optional[str]) -> int:
    if not text:
        return 0
    sign = 1 if text[0] == "+" else -1
    rest = text[1:]
    if rest.isdigit():
        return sign * int(rest)
    return sign * len(text)


def _parse_bracket(token: Token, masses: Dict[str, float]) -> Atom:
    inner = token.lexeme[1:-1]
    m = _BRACKET_RE.match(inner)
    if m is None:
        raise UnexpectedToken(token.position, f"malformed bracket atom {token.lexeme!r}")
    if m.group("chiral"):
        raise UnsupportedFeature(token.position, "stereochemistry '@' is not supported")
    symbol = m.group("symbol")
    aromatic = symbol[0].islower()
    element = symbol.capitalize()
    if element not in masses:
        raise UnexpectedToken(token.position, f"unknown element {symbol!r}")
    hcount = m.group("hcount")
    explicit_h = 0
    if hcount:
        explicit_h = int(hcount[1:]) if len(hcount) > 1 else 1
    isotope = int(m.group("isotope")) if m.group("isotope") else None
    return Atom(
        element=element,
        aromatic=aromatic,
        charge=_parse_charge(m.group("charge")),
        explicit_h=explicit_h,
        bracket=True,
        isotope=isotope,
        position=token.position,
    )


class _Parser:
    """递归下降解析器，一次性使用"""

    def __init__(self, tokens: List[Token], masses: Dict[str, float]):
        self.tokens = tokens
        self.index = 0
        self.masses = masses
        self.mol = ParsedMol(source="".join(t.lexeme for t in tokens))
        # 闭环标号 -> (原子下标, 键 token, 位置)
        self.open_rings: Dict[int, Tuple[int, Optional[Token], int]] = {}

    def peek(self) -> Optional[Token]:
        if self.index < len(self.tokens):
            return self.tokens[self.index]
        return None

    def advance(self) -> Token:
        token = self.tokens[self.index]
        self.index += 1
        return token

    def run(self) -> ParsedMol:
        self.parse_chain(None)
        token = self.peek()
        if token is not None:
            if token.kind == BRANCH_CLOSE:
                raise UnbalancedBranch(token.position, "')' without a matching '('")
            raise UnexpectedToken(token.position, f"unexpected {token.lexeme!r}")
        if not self.mol.atoms:
            raise UnexpectedToken(0, "no atoms")
        if self.open_rings:
            label, (_, _, position) = min(self.open_rings.items(), key=lambda kv: kv[1][2])
            raise UnclosedRing(position, f"ring closure {label} is never closed")
        return self.mol

    def add_atom(self, token: Token) -> int:
        if token.kind == ATOM:
            aromatic = token.lexeme in AROMATIC_SUBSET
            atom = Atom(element=token.lexeme.capitalize() if aromatic else token.lexeme,
                        aromatic=aromatic, position=token.position)
        else:
            atom = _parse_bracket(token, self.masses)
        self.mol.atoms.append(atom)
        return len(self.mol.atoms) - 1

    def add_bond(self, i: int, j: int, bond_token: Optional[Token], position: int) -> None:
        if bond_token is None:
            aromatic = self.mol.atoms[i].aromatic and self.mol.atoms[j].aromatic
            self.mol.bonds.append(Bond(i, j, 1, aromatic, position))
            return
        lexeme = bond_token.lexeme
        self.mol.bonds.append(Bond(i, j, _BOND_ORDERS[lexeme], lexeme == ":", bond_token.position))

    def close_ring(self, prev: int, token: Token, bond_token: Optional[Token]) -> None:
        label = int(token.lexeme.lstrip("%"))
        if label not in self.open_rings:
            self.open_rings[label] = (prev, bond_token, token.position)
            return
        start, open_bond, _ = self.open_rings.pop(label)
        if start == prev:
            raise UnexpectedToken(token.position, f"ring closure {label} bonds an atom to itself")
        if self.mol.has_bond(start, prev):
            raise UnexpectedToken(token.position, f"ring closure {label} duplicates an existing bond")
        if open_bond is not None and bond_token is not None and open_bond.lexeme != bond_token.lexeme:
            raise UnexpectedToken(token.position, f"ring closure {label} has conflicting bond symbols")
        self.add_bond(start, prev, bond_token or open_bond, token.position)
        self.mol.ring_closures.append((start, prev))

    def parse_chain(self, prev: Optional[int]) -> None:
        pending: Optional[Token] = None
        seen_atom = False
        while True:
            token = self.peek()
            if token is None or token.kind == BRANCH_CLOSE:
                break
            if token.kind == UNSUPPORTED:
                raise UnsupportedFeature(token.position, f"{token.lexeme!r} is outside the supported grammar")
            if token.kind == BOND:
                if pending is not None:
                    raise UnexpectedToken(token.position, "two bond symbols in a row")
                if prev is None:
                    raise UnexpectedToken(token.position, "bond without a preceding atom")
                pending = self.advance()
                continue
            if token.kind in (ATOM, BRACKET_ATOM):
                self.advance()
                current = self.add_atom(token)
                if prev is not None:
                    self.add_bond(prev, current, pending, token.position)
                prev, pending, seen_atom = current, None, True
                continue
            if token.kind == RING_CLOSURE:
                if prev is None or not seen_atom:
                    raise UnexpectedToken(token.position, "ring closure without a preceding atom")
                self.advance()
                self.close_ring(prev, token, pending)
                pending = None
                continue
            if token.kind == BRANCH_OPEN:
                if prev is None or pending is not None:
                    raise UnexpectedToken(token.position, "branch must follow an atom")
                self.advance()
                self.parse_branch(prev, token)
                continue
            raise UnexpectedToken(token.position, f"unexpected {token.lexeme!r}")
        if pending is not None:
            raise UnexpectedToken(pending.position, "bond symbol is not followed by an atom")

    def parse_branch(self, anchor: int, open_token: Token) -> None:
        first = self.peek()
        if first is None:
            raise UnbalancedBranch(open_token.position, "'(' is never closed")
        if first.kind == BRANCH_CLOSE:
            raise UnexpectedToken(first.position, "empty branch")
        atoms_before = len(self.mol.atoms)
        self.parse_chain(anchor)
        if len(self.mol.atoms) == atoms_before:
            token = self.peek()
            raise UnexpectedToken(token.position if token else open_token.position, "branch has no atoms")
        close = self.peek()
        if close is None or close.kind != BRANCH_CLOSE:
            raise UnbalancedBranch(open_token.position, "'(' is never closed")
        self.advance()


def parse(tokens: List[Token], masses: Optional[Dict[str, float]] = None) -> ParsedMol:
    """把 token 序列解析为分子并做语义检查

    Raises:
        UnclosedRing / UnbalancedBranch / ValenceExceeded / UnexpectedToken / UnsupportedFeature
    """
    table = masses if masses is not None else load_atomic_masses()
    mol = _Parser(list(tokens), table).run()
    implicit_hydrogens(mol)
    return mol


def parse_smiles(s: str) -> ParsedMol:
    return parse(tokenize(s.strip()))


# =============================================
# 化合价
# =============================================

def _allowed_valences(atom: Atom) -> Tuple[int, ...]:
    base = DEFAULT_VALENCES.get(atom.element)
    if base is None:
        return ()
    if atom.charge == 0:
        return base
    if atom.element in ("N", "P", "O", "S", "Se", "As"):
        return tuple(max(0, v + atom.charge) for v in base)
    if atom.element == "B":
        return tuple(max(0, v - atom.charge) for v in base)
    return tuple(max(0, v - abs(atom.charge)) for v in base)


def implicit_hydrogens(mol: ParsedMol) -> List[int]:
    """每个原子的氢数（有机子集原子为隐式氢，方括号原子只用显式 H）

    Raises:
        ValenceExceeded: 已用键级超过该元素允许的最大化合价
    """
    used = [0] * len(mol.atoms)
    double_bonded = [False] * len(mol.atoms)
    for bond in mol.bonds:
        for end in (bond.a, bond.b):
            used[end] += bond.valence_order
            if not bond.aromatic and bond.order >= 2:
                double_bonded[end] = True

    counts: List[int] = []
    for i, atom in enumerate(mol.atoms):
        allowed = _allowed_valences(atom)
        if atom.bracket:
            total = used[i] + atom.explicit_h
            if allowed and total > max(allowed):
                raise ValenceExceeded(atom.position, f"{atom.symbol} uses {total} bonds, max {max(allowed)}")
            counts.append(atom.explicit_h)
            continue
        total = used[i]
        if atom.aromatic and atom.element not in _LONE_PAIR_DONORS and not double_bonded[i]:
            total += 1
        fitting = [v for v in allowed if v >= total]
        if not fitting:
            raise ValenceExceeded(atom.position, f"{atom.symbol} uses {total} bonds, max {max(allowed)}")
        counts.append(min(fitting) - total)
    return counts


# =============================================
# 描述符
# =============================================

HYDROGEN_MASS = 1.008

_DATA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data")
MASS_TABLE_PATH = os.path.join(_DATA_DIR, "atomic_masses.json")


@lru_cache(maxsize=4)
def load_atomic_masses(path: str = MASS_TABLE_PATH) -> Dict[str, float]:
    """读取元素 -> 标准原子量 (g/mol) 表"""
    with open(path, "r", encoding="utf-8") as f:
        table = json.load(f)
    logger.debug(f"Loaded {len(table)} atomic masses from {path}")
    return {str(k): float(v) for k, v in table.items()}


def molecular_weight(mol: ParsedMol, table: Optional[Dict[str, float]] = None) -> float:
    """Σ 原子质量 + 氢数 × 1.008

    Raises:
        MissingElement: 质量表中没有该元素
    """
    table = table if table is not None else load_atomic_masses()
    hydrogens = implicit_hydrogens(mol)
    total = 0.0
    for atom, h in zip(mol.atoms, hydrogens):
        mass = table.get(atom.element)
        if mass is None:
            raise MissingElement(atom.position, f"no atomic mass for {atom.element}")
        total += mass + h * HYDROGEN_MASS
    return total


def simple_descriptors(mol: ParsedMol) -> Tuple[int, int, float]:
    """(重原子数, 闭环数, 芳香原子占重原子比例)"""
    heavy = [atom for atom in mol.atoms if atom.element != "H"]
    n_heavy = len(heavy)
    aromatic = sum(1 for atom in heavy if atom.aromatic)
    fraction = aromatic / n_heavy if n_heavy else 0.0
    return n_heavy, len(mol.ring_closures), fraction


# =============================================
# 输出与校验
# =============================================

def _render_atom(atom: Atom) -> str:
    if not atom.bracket:
        return atom.symbol
    parts = ["["]
    if atom.isotope is not None:
        parts.append(str(atom.isotope))
    parts.append(atom.symbol)
    if atom.explicit_h:
        parts.append("H" if atom.explicit_h == 1 else f"H{atom.explicit_h}")
    if atom.charge:
        sign = "+" if atom.charge > 0 else "-"
        parts.append(sign if abs(atom.charge) == 1 else f"{sign}{abs(atom.charge)}")
    parts.append("]")
    return "".join(parts)


def _render_bond(mol: ParsedMol, bond: Bond) -> str:
    both_aromatic = mol.atoms[bond.a].aromatic and mol.atoms[bond.b].aromatic
    if bond.aromatic:
        return "" if both_aromatic else ":"
    if bond.order == 1:
        return "-" if both_aromatic else ""
    return "=" if bond.order == 2 else "#"


def _ring_label(label: int) -> str:
    return str(label) if label < 10 else f"%{label:02d}"


def to_smiles(mol: ParsedMol) -> str:
    """按深度优先生成树把分子写回 SMILES（非规范形式）"""
    if not mol.atoms:
        return ""
    visited = [False] * len(mol.atoms)
    children: Dict[int, List[Tuple[int, Bond]]] = {i: [] for i in range(len(mol.atoms))}
    ring_bonds: Dict[int, List[Bond]] = {i: [] for i in range(len(mol.atoms))}
    seen_bonds = set()

    # 先用 DFS 确定树边与闭环边
    def visit(start: int) -> None:
        visited[start] = True
        for nbr, bond in mol.neighbors(start):
            if id(bond) in seen_bonds:
                continue
            seen_bonds.add(id(bond))
            if visited[nbr]:
                ring_bonds[nbr].append(bond)
                ring_bonds[start].append(bond)
            else:
                children[start].append((nbr, bond))
                visit(nbr)

    visit(0)

    labels: Dict[int, int] = {}
    free: List[int] = []
    next_label = [1]

    def take_label() -> int:
        if free:
            free.sort()
            return free.pop(0)
        label = next_label[0]
        next_label[0] += 1
        return label

    out: List[str] = []

    def emit(index: int) -> None:
        out.append(_render_atom(mol.atoms[index]))
        for bond in ring_bonds[index]:
            key = id(bond)
            if key in labels:
                label = labels.pop(key)
                out.append(_ring_label(label))
                free.append(label)
            else:
                label = take_label()
                labels[key] = label
                out.append(_render_bond(mol, bond) + _ring_label(label))
        kids = children[index]
        for i, (child, bond) in enumerate(kids):
            branch = i < len(kids) - 1
            if branch:
                out.append("(")
            out.append(_render_bond(mol, bond))
            emit(child)
            if branch:
                out.append(")")

    emit(0)
    return "".join(out)


STATUS_VALID = "valid"
STATUS_INVALID = "invalid"
STATUS_UNSUPPORTED = "unsupported"


@dataclass
class SmilesCheck:
    """单条字符串的校验结果"""
    text: str
    status: str
    mol: Optional[ParsedMol] = None
    error: Optional[SmilesError] = None

    @property
    def valid(self) -> bool:
        return self.status == STATUS_VALID


def check_smiles(text: str) -> SmilesCheck:
    """解析一条字符串并归类为 valid / invalid / unsupported，不抛异常"""
    normalized = text.strip()
    try:
        mol = parse(tokenize(normalized))
    except UnsupportedFeature as e:
        return SmilesCheck(normalized, STATUS_UNSUPPORTED, error=e)
    except SmilesError as e:
        return SmilesCheck(normalized, STATUS_INVALID, error=e)
    return SmilesCheck(normalized, STATUS_VALID, mol=mol)


def validate_smiles(text: str) -> Tuple[bool, str]:
    """校验 SMILES 字符串

    Returns:
        (是否有效, 原因)；有效时原因为空字符串
    """
    result = check_smiles(text)
    if result.valid:
        return True, ""
    return False, str(result.error)


def count_statuses(texts: Iterable[str]) -> Dict[str, int]:
    counts = {STATUS_VALID: 0, STATUS_INVALID: 0, STATUS_UNSUPPORTED: 0}
    for text in texts:
        counts[check_smiles(text).status] += 1
    return counts
