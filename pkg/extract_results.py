#!/usr/bin/env python3
"""
Script to collect study results from batch folders into one CSV table.
Each line in the output is one refinement level (or sweep case) of one run:
benchmark, name, batch, level, h, nno, ndof, error, rate
"""

import csv
import glob
import json
import os

OUTPUT_COLUMNS = ["benchmark", "name", "batch", "level", "h", "nno", "ndof", "error", "rate"]


def is_valid_run_log(data):
    """
    Check if a run log is valid and should be included in the extraction.

    Args:
        data (dict): The run log loaded from JSON file

    Returns:
        bool: True if run log is valid, False otherwise
    """
    if not data.get('benchmark') or not data.get('name'):
        return False

    if data.get('run_start') is None or data.get('run_end') is None:
        return False

    rows = data.get('rows', [])
    if not rows:
        return False

    # Convergence rows need a mesh size; failed levels carry no error
    if data['benchmark'] in ('cylinder', 'oblate'):
        for row in rows:
            if row.get('h') is None or row.get('nno') is None:
                return False
        if not any(row.get('success') and row.get('error') is not None for row in rows):
            return False

    return True


def extract_results_to_csv(input_dir="runs", output_file="results.csv"):
    """
    Extract all convergence rows from batch folders and save them as one CSV file.

    Args:
        input_dir (str): Directory containing batch folders
        output_file (str): Output CSV file path

    Returns:
        tuple: (number of rows written, number of logs skipped)
    """
    log_files = []
    for batch_dir in sorted(glob.glob(os.path.join(input_dir, "batch_*"))):
        if os.path.isdir(batch_dir):
            log_files.extend(sorted(glob.glob(os.path.join(batch_dir, "*", "run_log.json"))))

    print(f"Found {len(log_files)} run logs")

    written = 0
    skipped = 0
    with open(output_file, 'w', newline='', encoding='utf-8') as outfile:
        writer = csv.DictWriter(outfile, fieldnames=OUTPUT_COLUMNS, extrasaction='ignore')
        writer.writeheader()
        for file_path in log_files:
            try:
                with open(file_path, 'r', encoding='utf-8') as infile:
                    data = json.load(infile)
            except (OSError, json.JSONDecodeError) as e:
                print(f"Skipping unreadable run log: {file_path} ({e})")
                skipped += 1
                continue

            if not is_valid_run_log(data):
                print(f"Skipping invalid run log: {file_path}")
                print(f"  - benchmark: {data.get('benchmark')}")
                print(f"  - run_start: {data.get('run_start')}")
                print(f"  - rows: {len(data.get('rows', []))}")
                skipped += 1
                continue

            batch = os.path.basename(os.path.dirname(os.path.dirname(file_path)))
            for index, row in enumerate(data['rows']):
                if data['benchmark'] in ('cylinder', 'oblate') and not row.get('success', True):
                    continue
                writer.writerow({
                    "benchmark": data['benchmark'],
                    "name": data['name'],
                    "batch": batch,
                    "level": row.get('level', index),
                    "h": row.get('h', row.get('offset')),
                    "nno": row.get('nno', ''),
                    "ndof": row.get('ndof', ''),
                    "error": row.get('error', row.get('kappa', '')),
                    "rate": '' if row.get('rate') is None else row.get('rate'),
                })
                written += 1

    print(f"Extraction complete: {written} rows written, {skipped} run logs skipped")
    print(f"Output saved to: {output_file}")
    return written, skipped


if __name__ == "__main__":
    extract_results_to_csv()
