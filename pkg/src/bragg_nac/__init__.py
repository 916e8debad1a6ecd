"""Neural architecture codesign for Bragg peak localization."""
