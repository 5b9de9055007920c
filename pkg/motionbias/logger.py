"""
Console logging for motionbias.
Timestamped, compact lines with milestone progress and boxed banners.
"""
from datetime import datetime
from typing import Dict, List, Optional, Sequence, Tuple


class Logger:
    """Console logger with progress milestones and error aggregation."""

    def __init__(self):
        self.enable_epoch_logging = True
        self.enable_kspace_logging = False
        self.milestones_hit: Dict[str, set] = {}
        self.errors_buffer: List[Dict] = []

    def configure(self, debug) -> None:
        """Apply a DebugConfig section."""
        self.enable_epoch_logging = debug.enable_epoch_logging
        self.enable_kspace_logging = debug.enable_kspace_logging

    def timestamp(self) -> str:
        """Get formatted timestamp."""
        return f"[{datetime.now().strftime('%H:%M:%S')}]"

    def draw_box(self, title: str, width: int = 78) -> None:
        """Draw a box around text."""
        print("╔" + "═" * (width - 2) + "╗")
        padding = (width - 2 - len(title)) // 2
        print("║" + " " * padding + title + " " * (width - 2 - padding - len(title)) + "║")
        print("╚" + "═" * (width - 2) + "╝")

    def progress_bar(self, current: int, total: int, width: int = 30, fill: str = "█", empty: str = "░") -> str:
        """Generate ASCII progress bar."""
        if total == 0:
            return f"[{empty * width}]"

        filled = int(width * current / total)
        return f"[{fill * filled}{empty * (width - filled)}]"

    def banner(self, title: str, details: Optional[Dict[str, object]] = None) -> None:
        """Print a command banner with its key settings."""
        self.draw_box(title)
        for key, value in (details or {}).items():
            print(f"{self.timestamp()} {key}: {value}")
        print()

    def step(self, message: str) -> None:
        print(f"{self.timestamp()} {message}")

    def progress(self, label: str, current: int, total: int) -> None:
        """Log progress only when a 25% milestone is crossed."""
        if total <= 0:
            return
        hit = self.milestones_hit.setdefault(label, set())
        percent = current / total * 100
        for milestone in (25, 50, 75, 100):
            if percent >= milestone and milestone not in hit:
                hit.add(milestone)
                bar = self.progress_bar(current, total)
                print(f"{self.timestamp()} {label}: {bar} {current}/{total} ({milestone}%)")
        if current >= total:
            del self.milestones_hit[label]

    def epoch(self, epoch: int, max_epochs: int, train_loss: float, val_loss: float,
              improved: bool, seconds: float) -> None:
        if not self.enable_epoch_logging:
            return
        marker = " *" if improved else ""
        print(f"{self.timestamp()} epoch {epoch:>2}/{max_epochs} "
              f"train {train_loss:.4f} | val {val_loss:.4f} ({seconds:.1f}s){marker}")

    def early_stop(self, stopped_epoch: int, best_epoch: int, best_loss: float) -> None:
        print(f"{self.timestamp()} 🛑 Early stop after epoch {stopped_epoch}")
        print(f"           └─ best epoch {best_epoch}, val loss {best_loss:.4f}")

    def kspace_residue(self, residue: float) -> None:
        if self.enable_kspace_logging:
            print(f"{self.timestamp()} ifft imaginary residue {residue:.3e}")

    def arm_result(self, arm: str, mean: float, std: float, n: int) -> None:
        print(f"{self.timestamp()} ✅ {arm}: dice {mean:.3f} ± {std:.3f} (n={n})")

    def summary_table(self, title: str, header: Sequence[str], rows: Sequence[Tuple]) -> None:
        """Print a fixed-width table."""
        print(f"{self.timestamp()} {title}")
        widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) if rows else len(str(h))
                  for i, h in enumerate(header)]
        print("           " + "  ".join(str(h).ljust(w) for h, w in zip(header, widths)))
        for row in rows:
            print("           " + "  ".join(str(c).ljust(w) for c, w in zip(row, widths)))
        print()

    def warning(self, message: str) -> None:
        print(f"{self.timestamp()} ⚠️  {message}")

    def error(self, message: str, context: Optional[str] = None) -> None:
        """Buffer an error; summarize once five have accumulated."""
        self.errors_buffer.append({'time': datetime.now(), 'message': message, 'context': context})
        if len(self.errors_buffer) >= 5:
            self.error_summary()

    def error_summary(self) -> None:
        """Show aggregated error summary and clear the buffer."""
        if not self.errors_buffer:
            return

        error_groups: Dict[str, List[Dict]] = {}
        for entry in self.errors_buffer:
            error_groups.setdefault(entry['message'], []).append(entry)

        print(f"{self.timestamp()} ❌ ERRORS")
        for msg, entries in error_groups.items():
            count = f" ({len(entries)}x)" if len(entries) > 1 else ""
            print(f"           ├─ {msg}{count}")
            contexts = sorted({e['context'] for e in entries if e.get('context')})
            if contexts:
                print(f"              └─ Affected: {', '.join(contexts[:3])}")
        print()
        self.errors_buffer.clear()


# Global logger instance
logger = Logger()
