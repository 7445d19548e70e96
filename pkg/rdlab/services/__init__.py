# Services package for rdlab domain logic
