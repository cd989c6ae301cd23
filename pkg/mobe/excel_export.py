import io

from openpyxl import Workbook
from openpyxl.styles import Font, PatternFill

MAX_COLUMN_WIDTH = 50


def generate_report_excel(tables):
    """
    Build a workbook with one sheet per report table.
    tables: dict { "sheet name": (headers, rows) }
    Returns: BytesIO holding the xlsx file
    """
    wb = Workbook()

    # Drop the default sheet
    if wb.sheetnames:
        wb.remove(wb.active)

    # An empty workbook would not open
    if not tables:
        wb.create_sheet("No Data")

    for name, (headers, rows) in tables.items():
        # Sheet titles are <= 31 chars with no special characters
        safe_title = "".join(c for c in name if c.isalnum() or c in (" ", "-", "_"))[:30] or "Sheet"
        if safe_title in wb.sheetnames:
            safe_title = f"{safe_title[:27]}_{len(wb.sheetnames)}"

        ws = wb.create_sheet(title=safe_title)
        ws.append(list(headers))

        for cell in ws[1]:
            cell.font = Font(bold=True)
            cell.fill = PatternFill(start_color="DDDDDD", end_color="DDDDDD", fill_type="solid")

        for row in rows:
            ws.append(list(row))

        for col in ws.columns:
            longest = max(len(str(cell.value)) for cell in col if cell.value is not None)
            ws.column_dimensions[col[0].column_letter].width = min(longest + 2, MAX_COLUMN_WIDTH)

    out = io.BytesIO()
    wb.save(out)
    out.seek(0)
    return out


def save_report_excel(path, tables):
    with open(path, "wb") as fh:
        fh.write(generate_report_excel(tables).getvalue())
    return path
